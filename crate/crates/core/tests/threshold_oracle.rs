//! Fence search against a brute-force reimplementation.

use sentinel_core::detector::{adapt_thresholds, Metric, ThresholdParams};
use sentinel_core::{RngStream, SimRng};

/// Rank `1 + q (n - 1)` interpolation on a sorted copy, done by hand.
fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    // Insertion sort keeps this independent of the library sort.
    for i in 1..v.len() {
        let mut j = i;
        while j > 0 && v[j - 1] > v[j] {
            v.swap(j - 1, j);
            j -= 1;
        }
    }
    let pos = q * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

fn outside(values: &[f64], lo: f64, hi: f64) -> f64 {
    values.iter().filter(|v| **v < lo || **v > hi).count() as f64 / values.len() as f64
}

struct Fences {
    q1: f64,
    q2: f64,
    q3: f64,
    k: f64,
    lower: f64,
    upper: f64,
}

fn brute_force(h: &[f64], prev_k: f64, p: &ThresholdParams, metric: Metric) -> Fences {
    let (q1, q2, q3) = (quantile(h, 0.25), quantile(h, 0.5), quantile(h, 0.75));
    let iqr = (q3 - q1).max(p.iqr_floor);
    let mut k = prev_k;
    let mut n = 0;
    while outside(h, q2 - k * iqr, q2 + k * iqr) > p.alpha_fp && n < p.n_max {
        k *= p.growth;
        n += 1;
    }
    n = 0;
    while outside(h, q2 - k * iqr, q2 + k * iqr) < p.alpha_fp / 10.0 && n < p.n_max {
        k *= p.shrink;
        n += 1;
    }
    let i = metric as usize;
    let d = (q2.abs() * p.lambda[i]).max(p.min_distance[i]);
    Fences { q1, q2, q3, k, lower: (q2 - k * iqr).min(q2 - d), upper: (q2 + k * iqr).max(q2 + d) }
}

fn random_history(rng: &mut SimRng) -> Vec<f64> {
    let n = 1 + rng.below(300);
    match rng.below(5) {
        0 => (0..n).map(|_| 1.0 + 0.2 * rng.normal()).collect(),
        // Lattice values such as sign-flip ratios.
        1 => (0..n).map(|_| rng.below(9) as f64 / 8.0).collect(),
        2 => (0..n).map(|_| (3.0 * rng.normal()).exp()).collect(),
        3 => vec![rng.uniform(); n],
        _ => (0..n).map(|_| if rng.bernoulli(0.05) { 50.0 * rng.uniform() } else { rng.uniform() }).collect(),
    }
}

fn random_params(rng: &mut SimRng) -> ThresholdParams {
    let mut p = ThresholdParams::default();
    if rng.bernoulli(0.5) {
        p.lambda = [rng.uniform(), rng.uniform(), rng.uniform(), rng.uniform()];
        p.min_distance = [0.0, 0.0, 0.5 * rng.uniform(), 0.0];
    }
    p
}

/// Number of cases where any output differs from the oracle.
pub fn mismatches(cases: usize) -> usize {
    let mut rng = RngStream::new(77, "threshold-oracle").rng();
    let mut bad = 0;
    for _ in 0..cases {
        let h = random_history(&mut rng);
        let p = random_params(&mut rng);
        let metric = Metric::ALL[rng.below(4)];
        let prev_k = 0.2 + 4.0 * rng.uniform();
        let got = adapt_thresholds(&h, prev_k, &p, metric).unwrap();
        let want = brute_force(&h, prev_k, &p, metric);
        let same = got.q1 == want.q1
            && got.q2 == want.q2
            && got.q3 == want.q3
            && got.k == want.k
            && got.lower == want.lower
            && got.upper == want.upper;
        if !same {
            bad += 1;
        }
    }
    bad
}

#[test]
fn fences_match_brute_force_exactly() {
    assert_eq!(mismatches(1000), 0);
}
