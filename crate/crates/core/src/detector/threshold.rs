use alloc::collections::VecDeque;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::numerics;

use super::Metric;

/// Constants of the adaptive fence search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdParams {
    pub k0: f64,
    pub alpha_fp: f64,
    pub growth: f64,
    pub shrink: f64,
    pub n_max: usize,
    /// Minimum fence distance as a fraction of `|q2|`, indexed by [`Metric`].
    pub lambda: [f64; 4],
    /// Absolute minimum fence distance, indexed by [`Metric`]. Keeps the
    /// fences of a lattice-valued metric such as SFR off a zero median.
    pub min_distance: [f64; 4],
    /// Floor applied to the interquartile range.
    pub iqr_floor: f64,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        Self {
            k0: 1.5,
            alpha_fp: 0.01,
            growth: 1.2,
            shrink: 0.9,
            n_max: 50,
            lambda: [3.0, 12.0, 1.0, 3.0],
            min_distance: [0.0, 0.0, 0.5, 0.0],
            iqr_floor: 1e-12,
        }
    }
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.k0 > 0.0) {
            return Err(Error::InvalidParameter("k0 must be positive"));
        }
        if !(self.alpha_fp > 0.0 && self.alpha_fp < 1.0) {
            return Err(Error::InvalidParameter("alpha_fp must lie in (0, 1)"));
        }
        if !(self.growth > 1.0) || !(self.shrink > 0.0 && self.shrink < 1.0) {
            return Err(Error::InvalidParameter("growth must exceed 1 and shrink lie in (0, 1)"));
        }
        if self.lambda.iter().chain(&self.min_distance).any(|l| !(*l >= 0.0)) {
            return Err(Error::InvalidParameter("lambda must be non-negative"));
        }
        Ok(())
    }
}

/// Fences for one (stage, metric, signal kind) stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdState {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub k: f64,
    pub lower: f64,
    pub upper: f64,
    pub initialized: bool,
}

impl ThresholdState {
    pub fn uninitialized(k0: f64) -> Self {
        Self { q1: 0.0, q2: 0.0, q3: 0.0, k: k0, lower: 0.0, upper: 0.0, initialized: false }
    }

    /// Fences that never fire.
    pub fn unbounded() -> Self {
        Self {
            q1: 0.0,
            q2: 0.0,
            q3: 0.0,
            k: f64::INFINITY,
            lower: f64::NEG_INFINITY,
            upper: f64::INFINITY,
            initialized: true,
        }
    }

    /// `q3 - q1` as used by the decision rules (floored).
    pub fn iqr(&self, floor: f64) -> f64 {
        (self.q3 - self.q1).max(floor)
    }
}

/// Rolling window of deviations judged clean at insertion time.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviationHistory {
    capacity: usize,
    values: VecDeque<f64>,
}

impl DeviationHistory {
    pub fn new(capacity: usize) -> Self {
        Self { capacity: capacity.max(1), values: VecDeque::with_capacity(capacity.max(1)) }
    }

    pub fn push(&mut self, v: f64) {
        if self.values.len() == self.capacity {
            self.values.pop_front();
        }
        self.values.push_back(v);
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.values.iter().copied().collect()
    }
}

/// Fraction of `sorted` strictly outside `[lower, upper]`.
fn outside_fraction(sorted: &[f64], lower: f64, upper: f64) -> f64 {
    let below = sorted.partition_point(|v| *v < lower);
    let above = sorted.len() - sorted.partition_point(|v| *v <= upper);
    (below + above) as f64 / sorted.len() as f64
}

/// Recomputes the quartiles of `history` and searches `k` starting from
/// `prev_k`: grow while the window's outside fraction exceeds `alpha_fp`,
/// shrink while it is below `alpha_fp / 10`, then keep the fences at least
/// `max(lambda * |q2|, min_distance)` away from the median.
pub fn adapt_thresholds(
    history: &[f64],
    prev_k: f64,
    params: &ThresholdParams,
    metric: Metric,
) -> Result<ThresholdState> {
    if history.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let mut sorted = history.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q1 = numerics::percentile_sorted(&sorted, 0.25)?;
    let q2 = numerics::percentile_sorted(&sorted, 0.5)?;
    let q3 = numerics::percentile_sorted(&sorted, 0.75)?;
    let iqr = (q3 - q1).max(params.iqr_floor);

    let mut k = prev_k;
    let mut fp = outside_fraction(&sorted, q2 - k * iqr, q2 + k * iqr);
    let mut iter = 0;
    while fp > params.alpha_fp && iter < params.n_max {
        k *= params.growth;
        fp = outside_fraction(&sorted, q2 - k * iqr, q2 + k * iqr);
        iter += 1;
    }
    iter = 0;
    while fp < params.alpha_fp / 10.0 && iter < params.n_max {
        k *= params.shrink;
        fp = outside_fraction(&sorted, q2 - k * iqr, q2 + k * iqr);
        iter += 1;
    }

    let d_min = (q2.abs() * params.lambda[metric.index()]).max(params.min_distance[metric.index()]);
    let lower = (q2 - k * iqr).min(q2 - d_min);
    let upper = (q2 + k * iqr).max(q2 + d_min);
    Ok(ThresholdState { q1, q2, q3, k, lower, upper, initialized: true })
}

/// `gamma` lies strictly outside the fences.
pub fn tukey_flag(gamma: f64, th: &ThresholdState) -> Result<bool> {
    if !th.initialized {
        return Err(Error::NotWarmedUp);
    }
    Ok(gamma < th.lower || gamma > th.upper)
}

/// `|gamma - q2|` at least 100 times the fence half-width on that side
/// (`k * IQR`, or the minimum distance when that dominates).
pub fn is_severe(gamma: f64, th: &ThresholdState) -> Result<bool> {
    if !th.initialized {
        return Err(Error::NotWarmedUp);
    }
    let half = if gamma >= th.q2 { th.upper - th.q2 } else { th.q2 - th.lower };
    if !half.is_finite() {
        return Ok(false);
    }
    Ok((gamma - th.q2).abs() >= 100.0 * half)
}
