//! Analytic stage gradients against central finite differences of the loss.

use sentinel_core::model::{loss_and_grad, stage_backward, stage_forward, Activation, StageParams};
use sentinel_core::{Matrix, RngStream, SimRng};

struct Case {
    stages: Vec<StageParams>,
    input: Matrix,
    targets: Matrix,
}

fn random_case(rng: &mut SimRng) -> Case {
    let depth = 1 + rng.below(3);
    let batch = 1 + rng.below(5);
    let mut dims = vec![1 + rng.below(6)];
    for _ in 0..depth {
        dims.push(1 + rng.below(6));
    }
    let stages = (0..depth)
        .map(|s| {
            let w = Matrix::random_normal(dims[s], dims[s + 1], 0.8, rng);
            let b = (0..dims[s + 1]).map(|_| 0.3 * rng.normal()).collect();
            let act = if rng.bernoulli(0.5) { Activation::Tanh } else { Activation::Identity };
            StageParams::new(s + 1, w, b, act).unwrap()
        })
        .collect();
    Case {
        stages,
        input: Matrix::random_normal(batch, dims[0], 1.0, rng),
        targets: Matrix::random_normal(batch, dims[depth], 1.0, rng),
    }
}

fn loss(stages: &[StageParams], input: &Matrix, targets: &Matrix) -> f64 {
    let mut h = input.clone();
    for st in stages {
        h = stage_forward(st, &h).unwrap();
    }
    loss_and_grad(&h, targets).unwrap().0
}

/// Flattened gradients of every stage's weights and biases, then the input.
fn analytic(case: &Case) -> Vec<f64> {
    let mut inputs = vec![case.input.clone()];
    for st in &case.stages {
        let next = stage_forward(st, inputs.last().unwrap()).unwrap();
        inputs.push(next);
    }
    let (_, mut up) = loss_and_grad(inputs.last().unwrap(), &case.targets).unwrap();
    let mut per_stage = Vec::new();
    for (s, st) in case.stages.iter().enumerate().rev() {
        let (pg, gin) = stage_backward(st, Some(&inputs[s]), &up).unwrap();
        per_stage.push(pg);
        up = gin;
    }
    per_stage.reverse();
    let mut out = Vec::new();
    for pg in per_stage {
        out.extend_from_slice(pg.weights.as_slice());
        out.extend_from_slice(&pg.bias);
    }
    out.extend_from_slice(up.as_slice());
    out
}

fn numeric(case: &Case, h: f64) -> Vec<f64> {
    let mut out = Vec::new();
    let central = |plus: f64, minus: f64| (plus - minus) / (2.0 * h);
    for s in 0..case.stages.len() {
        for i in 0..case.stages[s].weights.as_slice().len() {
            let mut a = case.stages.clone();
            let mut b = case.stages.clone();
            a[s].weights.as_mut_slice()[i] += h;
            b[s].weights.as_mut_slice()[i] -= h;
            out.push(central(loss(&a, &case.input, &case.targets), loss(&b, &case.input, &case.targets)));
        }
        for i in 0..case.stages[s].bias.len() {
            let mut a = case.stages.clone();
            let mut b = case.stages.clone();
            a[s].bias[i] += h;
            b[s].bias[i] -= h;
            out.push(central(loss(&a, &case.input, &case.targets), loss(&b, &case.input, &case.targets)));
        }
    }
    for i in 0..case.input.as_slice().len() {
        let mut a = case.input.clone();
        let mut b = case.input.clone();
        a.as_mut_slice()[i] += h;
        b.as_mut_slice()[i] -= h;
        out.push(central(loss(&case.stages, &a, &case.targets), loss(&case.stages, &b, &case.targets)));
    }
    out
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error over `n` seeded configurations.
pub fn worst_relative_error(n: usize) -> f64 {
    let mut rng = RngStream::new(2024, "gradient-oracle").rng();
    let mut worst = 0.0_f64;
    for _ in 0..n {
        let case = random_case(&mut rng);
        let a = analytic(&case);
        let f = numeric(&case, 1e-6);
        let diff: Vec<f64> = a.iter().zip(&f).map(|(x, y)| x - y).collect();
        let scale = norm(&a).max(norm(&f)).max(1e-8);
        worst = worst.max(norm(&diff) / scale);
    }
    worst
}

#[test]
fn analytic_gradients_match_finite_differences() {
    let worst = worst_relative_error(100);
    assert!(worst <= 1e-5, "worst relative error {worst:e}");
}
