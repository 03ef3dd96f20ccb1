//! Pipeline-partitioned feed-forward network with manual backprop.
//!
//! One dense layer per stage: `tanh(x W + b)` for hidden stages and the
//! identity for the final stage. Training is momentum SGD with the balanced
//! update `v <- beta v + (1 - beta) g`, `theta <- theta - eta v`.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{RngStream, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StageParams {
    /// One-based stage index.
    pub index: usize,
    /// `m_in x m_out`
    pub weights: Matrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl StageParams {
    pub fn new(index: usize, weights: Matrix, bias: Vec<f64>, activation: Activation) -> Result<Self> {
        if bias.len() != weights.cols() {
            return Err(Error::ShapeMismatch);
        }
        Ok(Self { index, weights, bias, activation })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn num_params(&self) -> usize {
        self.weights.rows() * self.weights.cols() + self.bias.len()
    }

    fn pre_activation(&self, input: &Matrix) -> Result<Matrix> {
        if input.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch);
        }
        let mut z = input.matmul(&self.weights)?;
        for r in 0..z.rows() {
            for (v, b) in z.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(z)
    }
}

/// Gradient (or velocity) with the same layout as [`StageParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrad {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl ParamGrad {
    pub fn zeros_like(params: &StageParams) -> Self {
        Self {
            weights: Matrix::zeros(params.weights.rows(), params.weights.cols()),
            bias: vec![0.0; params.bias.len()],
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights.is_finite() && self.bias.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &ParamGrad) -> Result<()> {
        if self.weights.shape() != other.weights.shape() || self.bias.len() != other.bias.len() {
            return Err(Error::ShapeMismatch);
        }
        for (a, b) in self.weights.as_mut_slice().iter_mut().zip(other.weights.as_slice()) {
            *a += b;
        }
        for (a, b) in self.bias.iter_mut().zip(&other.bias) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.weights.as_mut_slice() {
            *v *= s;
        }
        for v in &mut self.bias {
            *v *= s;
        }
    }

    /// Flattened view: weights row-major, then bias.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = self.weights.as_slice().to_vec();
        out.extend_from_slice(&self.bias);
        out
    }

    fn from_flat(template: &ParamGrad, flat: &[f64]) -> Self {
        let nw = template.weights.rows() * template.weights.cols();
        Self {
            weights: Matrix::from_vec(template.weights.rows(), template.weights.cols(), flat[..nw].to_vec())
                .expect("template shape"),
            bias: flat[nw..].to_vec(),
        }
    }
}

pub fn stage_forward(params: &StageParams, input: &Matrix) -> Result<Matrix> {
    let z = params.pre_activation(input)?;
    Ok(match params.activation {
        Activation::Tanh => z.map(libm::tanh),
        Activation::Identity => z,
    })
}

/// Exact gradients of one stage given the cached stage input and the gradient
/// of the loss with respect to the stage output. Returns
/// `(parameter gradient, gradient with respect to the stage input)`.
pub fn stage_backward(
    params: &StageParams,
    cached_input: Option<&Matrix>,
    upstream: &Matrix,
) -> Result<(ParamGrad, Matrix)> {
    let input = cached_input.ok_or(Error::NoCachedInput)?;
    if upstream.rows() != input.rows() || upstream.cols() != params.output_dim() {
        return Err(Error::ShapeMismatch);
    }
    let dz = match params.activation {
        Activation::Identity => upstream.clone(),
        Activation::Tanh => {
            let z = params.pre_activation(input)?;
            let mut dz = upstream.clone();
            for (d, zv) in dz.as_mut_slice().iter_mut().zip(z.as_slice()) {
                let a = libm::tanh(*zv);
                *d *= 1.0 - a * a;
            }
            dz
        }
    };
    let grad_w = input.t_matmul(&dz)?;
    let grad_b = dz.sum_rows();
    let grad_in = dz.matmul_t(&params.weights)?;
    Ok((ParamGrad { weights: grad_w, bias: grad_b }, grad_in))
}

/// `0.5 * mean((a - t)^2)` over every element, and its gradient `(a - t) / N`.
pub fn loss_and_grad(prediction: &Matrix, targets: &Matrix) -> Result<(f64, Matrix)> {
    if prediction.shape() != targets.shape() {
        return Err(Error::ShapeMismatch);
    }
    let n = prediction.as_slice().len().max(1) as f64;
    let diff = prediction.sub(targets)?;
    let loss = 0.5 * diff.as_slice().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.scale(1.0 / n)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AggregationMode {
    #[default]
    Mean,
    CoordinateMedian,
}

/// All-reduce of the replicas' parameter gradients for one stage.
pub fn aggregate_param_grads(grads: &[ParamGrad], mode: AggregationMode) -> Result<ParamGrad> {
    let first = grads.first().ok_or(Error::NoReplicas)?;
    if grads.len() == 1 {
        return Ok(first.clone());
    }
    for g in &grads[1..] {
        if g.weights.shape() != first.weights.shape() || g.bias.len() != first.bias.len() {
            return Err(Error::ShapeMismatch);
        }
    }
    match mode {
        AggregationMode::Mean => {
            let mut acc = first.clone();
            for g in &grads[1..] {
                acc.add_assign(g)?;
            }
            acc.scale(1.0 / grads.len() as f64);
            Ok(acc)
        }
        AggregationMode::CoordinateMedian => {
            let flats: Vec<Vec<f64>> = grads.iter().map(ParamGrad::flatten).collect();
            let mut column = vec![0.0; grads.len()];
            let out: Vec<f64> = (0..flats[0].len())
                .map(|i| {
                    for (c, f) in column.iter_mut().zip(&flats) {
                        *c = f[i];
                    }
                    crate::numerics::percentile(&column, 0.5).expect("non-empty")
                })
                .collect();
            Ok(ParamGrad::from_flat(first, &out))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub velocity: ParamGrad,
    pub lr: f64,
    pub momentum: f64,
}

impl OptimizerState {
    pub fn new(params: &StageParams, lr: f64, momentum: f64) -> Self {
        Self { velocity: ParamGrad::zeros_like(params), lr, momentum }
    }
}

/// One balanced-momentum step, in place.
pub fn momentum_sgd_step(params: &mut StageParams, opt: &mut OptimizerState, grad: &ParamGrad) -> Result<()> {
    if !grad.is_finite() {
        return Err(Error::NonFiniteGradient);
    }
    if grad.weights.shape() != params.weights.shape() || grad.bias.len() != params.bias.len() {
        return Err(Error::ShapeMismatch);
    }
    let beta = opt.momentum;
    let lr = opt.lr;
    let vel = &mut opt.velocity;
    for ((w, v), g) in
        params.weights.as_mut_slice().iter_mut().zip(vel.weights.as_mut_slice()).zip(grad.weights.as_slice())
    {
        *v = beta * *v + (1.0 - beta) * g;
        *w -= lr * *v;
    }
    for ((b, v), g) in params.bias.iter_mut().zip(vel.bias.iter_mut()).zip(&grad.bias) {
        *v = beta * *v + (1.0 - beta) * g;
        *b -= lr * *v;
    }
    Ok(())
}

/// Stage inputs stored during forward, keyed by `(stage, replica)`.
#[derive(Debug, Clone, Default)]
pub struct StageCache {
    inputs: BTreeMap<(usize, usize), Matrix>,
}

impl StageCache {
    pub fn store(&mut self, stage: usize, replica: usize, input: Matrix) {
        self.inputs.insert((stage, replica), input);
    }

    pub fn get(&self, stage: usize, replica: usize) -> Option<&Matrix> {
        self.inputs.get(&(stage, replica))
    }

    pub fn clear(&mut self) {
        self.inputs.clear();
    }
}

/// Shape of the pipeline: `stages` one-layer stages, hidden width shared.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkShape {
    pub stages: usize,
    pub input_dim: usize,
    pub hidden_width: usize,
    pub output_dim: usize,
}

impl NetworkShape {
    pub fn stage_dims(&self, stage: usize) -> (usize, usize) {
        let m_in = if stage == 1 { self.input_dim } else { self.hidden_width };
        let m_out = if stage == self.stages { self.output_dim } else { self.hidden_width };
        (m_in, m_out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub stages: Vec<StageParams>,
}

impl Network {
    /// Weights `N(0, gain^2 / m_in)`, biases `N(0, bias_scale^2)`.
    pub fn random(shape: NetworkShape, gain: f64, bias_scale: f64, rng: &mut SimRng) -> Result<Self> {
        if shape.stages < 2 {
            return Err(Error::InvalidParameter("at least two stages required"));
        }
        let mut stages = Vec::with_capacity(shape.stages);
        for s in 1..=shape.stages {
            let (m_in, m_out) = shape.stage_dims(s);
            let w = Matrix::random_normal(m_in, m_out, gain / libm::sqrt(m_in as f64), rng);
            let b = (0..m_out).map(|_| rng.normal() * bias_scale).collect();
            let act = if s == shape.stages { Activation::Identity } else { Activation::Tanh };
            stages.push(StageParams::new(s, w, b, act)?);
        }
        Ok(Self { stages })
    }

    pub fn forward(&self, input: &Matrix) -> Result<Matrix> {
        let mut h = input.clone();
        for st in &self.stages {
            h = stage_forward(st, &h)?;
        }
        Ok(h)
    }

    pub fn loss(&self, batch: &Batch) -> Result<f64> {
        let pred = self.forward(&batch.inputs)?;
        Ok(loss_and_grad(&pred, &batch.targets)?.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Matrix,
    pub targets: Matrix,
}

/// Synthetic regression against a fixed random teacher network.
#[derive(Debug, Clone)]
pub struct TeacherTask {
    pub shape: NetworkShape,
    pub teacher: Network,
    /// Constant offset added to every input coordinate.
    pub input_shift: f64,
}

impl TeacherTask {
    pub fn new(shape: NetworkShape, teacher_seed: u64, input_shift: f64) -> Result<Self> {
        let mut rng = RngStream::new(teacher_seed, "teacher").rng();
        let teacher = Network::random(shape, 1.5, 0.5, &mut rng)?;
        Ok(Self { shape, teacher, input_shift })
    }

    pub fn sample(&self, batch_size: usize, rng: &mut SimRng) -> Result<Batch> {
        if batch_size == 0 {
            return Err(Error::InvalidParameter("batch size must be positive"));
        }
        let mut inputs = Matrix::random_normal(batch_size, self.shape.input_dim, 1.0, rng);
        for v in inputs.as_mut_slice() {
            *v += self.input_shift;
        }
        let targets = self.teacher.forward(&inputs)?;
        Ok(Batch { inputs, targets })
    }

    pub fn init_student(&self, rng: &mut SimRng) -> Result<Network> {
        Network::random(self.shape, 1.0, 0.1, rng)
    }
}
