//! Training-interruption attacks and their schedule.

use alloc::collections::{BTreeSet, VecDeque};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::numerics::{self, RngStream, SimRng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum SignalKind {
    Activation,
    Gradient,
}

impl SignalKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SignalKind::Activation => "activation",
            SignalKind::Gradient => "gradient",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum BiasSigma {
    Fixed(f64),
    /// `scale * stealth_sigma(x)`
    Stealth {
        scale: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AttackVariant {
    Constant { value: f64 },
    RandomValue,
    Scaling { factor: f64 },
    RandomSign { flip_prob: f64 },
    BiasAddition { sigma: BiasSigma },
    Delay { steps: usize },
    InvisibleNoise { quantile: f64 },
    AdaptiveEma { drift_rate: f64, noise_sigma: f64, beta: f64 },
}

impl AttackVariant {
    pub fn name(&self) -> &'static str {
        match self {
            AttackVariant::Constant { .. } => "constant",
            AttackVariant::RandomValue => "random-value",
            AttackVariant::Scaling { .. } => "scaling",
            AttackVariant::RandomSign { .. } => "random-sign",
            AttackVariant::BiasAddition { .. } => "bias-addition",
            AttackVariant::Delay { .. } => "delay",
            AttackVariant::InvisibleNoise { .. } => "invisible-noise",
            AttackVariant::AdaptiveEma { .. } => "adaptive-ema",
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            AttackVariant::Constant { value } => value.is_finite(),
            AttackVariant::RandomValue => true,
            AttackVariant::Scaling { factor } => factor.is_finite(),
            AttackVariant::RandomSign { flip_prob } => (0.0..=1.0).contains(&flip_prob),
            AttackVariant::BiasAddition { sigma: BiasSigma::Fixed(s) } => s >= 0.0 && s.is_finite(),
            AttackVariant::BiasAddition { sigma: BiasSigma::Stealth { scale } } => scale >= 0.0 && scale.is_finite(),
            AttackVariant::Delay { steps } => steps >= 1,
            AttackVariant::InvisibleNoise { quantile } => quantile > 0.0 && quantile < 1.0,
            AttackVariant::AdaptiveEma { drift_rate, noise_sigma, beta } => {
                drift_rate.is_finite() && noise_sigma >= 0.0 && (0.0..1.0).contains(&beta) && beta > 0.0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter("attack parameters out of range"))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackSpec {
    pub variant: AttackVariant,
    pub target: SignalKind,
    /// Optional cap on the per-row perturbation norm `||x_hat - x||`.
    pub clip_norm: Option<f64>,
}

impl AttackSpec {
    pub fn new(variant: AttackVariant, target: SignalKind) -> Self {
        Self { variant, target, clip_norm: None }
    }
}

/// `||x|| / sqrt(m)`, the noise scale whose expected norm matches `x`.
pub fn stealth_sigma(x: &[f64]) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    numerics::norm(x) / libm::sqrt(x.len() as f64)
}

/// `sqrt(2) * erfinv(2p - 1)` with `p = 1 - quantile`.
pub fn invisible_z_max(quantile: f64) -> Result<f64> {
    let p = 1.0 - quantile;
    Ok(core::f64::consts::SQRT_2 * numerics::erfinv(2.0 * p - 1.0)?)
}

/// Staleness of the adaptive attacker's EMA: `ceil(ln 0.1 / ln beta)`.
pub fn adaptive_delta(beta: f64) -> Result<usize> {
    if !(beta > 0.0 && beta < 1.0) {
        return Err(Error::InvalidParameter("beta must lie in (0, 1)"));
    }
    Ok(libm::ceil(libm::log(0.1) / libm::log(beta)) as usize)
}

/// Ring of the last `k` honest payloads seen by one attacker.
#[derive(Debug, Clone)]
pub struct DelayBuffer {
    capacity: usize,
    items: VecDeque<Matrix>,
}

impl DelayBuffer {
    pub fn new(k: usize) -> Self {
        Self { capacity: k.max(1), items: VecDeque::with_capacity(k.max(1)) }
    }

    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }

    /// The payload from `k` pushes ago, once the buffer is full.
    pub fn oldest(&self) -> Option<&Matrix> {
        if self.is_full() {
            self.items.front()
        } else {
            None
        }
    }

    pub fn push(&mut self, x: Matrix) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(x);
    }
}

pub struct AttackContext<'a> {
    pub iteration: u64,
    pub rng: &'a mut SimRng,
    pub delay: Option<&'a DelayBuffer>,
    /// `(stale EMA m_{t-delta}, drift target)` for the adaptive attack.
    pub adaptive: Option<(&'a [f64], &'a [f64])>,
}

/// Returns the malicious payload. `x` (batch x features) is left untouched.
pub fn apply_attack(spec: &AttackSpec, x: &Matrix, ctx: AttackContext<'_>) -> Result<Matrix> {
    let rng = ctx.rng;
    let mut out = match spec.variant {
        AttackVariant::Constant { value } => x.map(|_| value),
        AttackVariant::RandomValue => Matrix::random_normal(x.rows(), x.cols(), 1.0, rng),
        AttackVariant::Scaling { factor } => x.scale(factor),
        AttackVariant::RandomSign { flip_prob } => {
            let mut y = x.clone();
            for v in y.as_mut_slice() {
                if flip_prob >= 1.0 || rng.bernoulli(flip_prob) {
                    *v = -*v;
                }
            }
            y
        }
        AttackVariant::BiasAddition { sigma } => {
            let s = match sigma {
                BiasSigma::Fixed(s) => s,
                BiasSigma::Stealth { scale } => scale * stealth_sigma(x.as_slice()),
            };
            let mut y = x.clone();
            if s > 0.0 {
                for v in y.as_mut_slice() {
                    *v += s * rng.normal();
                }
            }
            y
        }
        AttackVariant::Delay { .. } => {
            let buf = ctx.delay.ok_or(Error::MissingAttackContext)?;
            match buf.oldest() {
                Some(old) if old.shape() == x.shape() => old.clone(),
                _ => x.clone(),
            }
        }
        AttackVariant::InvisibleNoise { quantile } => {
            let z = invisible_z_max(quantile)?;
            let mu = numerics::mean(x.as_slice());
            let mut y = x.clone();
            for v in y.as_mut_slice() {
                let sigma = (*v - mu).abs();
                *v = mu + z * sigma * rng.normal();
            }
            y
        }
        AttackVariant::AdaptiveEma { drift_rate, noise_sigma, .. } => {
            let (stale, target) = ctx.adaptive.ok_or(Error::MissingAttackContext)?;
            if stale.len() != x.cols() || target.len() != x.cols() {
                return Err(Error::ShapeMismatch);
            }
            let scale = drift_rate / numerics::norm(stale).max(1e-12);
            let base: Vec<f64> = stale.iter().zip(target).map(|(m, t)| m + scale * (t - m)).collect();
            let mut y = Matrix::broadcast_row(&base, x.rows());
            for v in y.as_mut_slice() {
                *v += noise_sigma * rng.normal();
            }
            y
        }
    };
    if let Some(eps) = spec.clip_norm {
        clip_perturbation(x, &mut out, eps);
    }
    Ok(out)
}

/// Shrinks `y - x` row by row to norm at most `eps`.
fn clip_perturbation(x: &Matrix, y: &mut Matrix, eps: f64) {
    for r in 0..x.rows() {
        let xr = x.row(r);
        let yr = y.row_mut(r);
        let n = libm::sqrt(xr.iter().zip(yr.iter()).map(|(a, b)| (b - a) * (b - a)).sum());
        if n > eps {
            let s = eps / n;
            for (b, a) in yr.iter_mut().zip(xr) {
                *b = a + (*b - a) * s;
            }
        }
    }
}

/// Per-attacker mutable state: delay ring, own EMA with a stale trail, drift
/// target and random stream.
#[derive(Debug, Clone)]
pub struct AttackerState {
    pub spec: AttackSpec,
    rng: SimRng,
    delay: Option<DelayBuffer>,
    ema: Option<Vec<f64>>,
    trail: VecDeque<Vec<f64>>,
    drift_target: Option<Vec<f64>>,
}

impl AttackerState {
    pub fn new(spec: AttackSpec, stream: RngStream) -> Self {
        let delay = match spec.variant {
            AttackVariant::Delay { steps } => Some(DelayBuffer::new(steps)),
            _ => None,
        };
        Self { spec, rng: stream.rng(), delay, ema: None, trail: VecDeque::new(), drift_target: None }
    }

    /// Records the honest payload of this iteration. Call after [`Self::attack`].
    pub fn observe(&mut self, honest: &Matrix) {
        if let Some(buf) = &mut self.delay {
            buf.push(honest.clone());
        }
        if let AttackVariant::AdaptiveEma { beta, .. } = self.spec.variant {
            let mean = honest.mean_rows();
            let ema = self.ema.get_or_insert_with(|| alloc::vec![0.0; mean.len()]);
            for (m, v) in ema.iter_mut().zip(&mean) {
                *m = beta * *m + (1.0 - beta) * v;
            }
            let delta = adaptive_delta(beta).unwrap_or(1);
            self.trail.push_back(ema.clone());
            while self.trail.len() > delta + 1 {
                self.trail.pop_front();
            }
            if self.drift_target.is_none() {
                self.drift_target = Some(self.rng.unit_vector(mean.len()));
            }
        }
    }

    /// Malicious payload for `honest`, or the honest payload while the
    /// attacker's buffers are still filling.
    pub fn attack(&mut self, honest: &Matrix, iteration: u64) -> Result<Matrix> {
        match self.spec.variant {
            AttackVariant::AdaptiveEma { beta, .. } => {
                let delta = adaptive_delta(beta)?;
                if self.trail.len() <= delta {
                    return Ok(honest.clone());
                }
                let stale = self.trail.front().expect("non-empty").clone();
                let target = self.drift_target.clone().expect("set with trail");
                apply_attack(
                    &self.spec,
                    honest,
                    AttackContext { iteration, rng: &mut self.rng, delay: None, adaptive: Some((&stale, &target)) },
                )
            }
            _ => apply_attack(
                &self.spec,
                honest,
                AttackContext { iteration, rng: &mut self.rng, delay: self.delay.as_ref(), adaptive: None },
            ),
        }
    }
}

/// One malicious worker: where it sits, what it does, when it starts.
#[derive(Debug, Clone, PartialEq)]
pub struct MaliciousWorker {
    pub stage: usize,
    pub replica: usize,
    pub start: u64,
    pub spec: AttackSpec,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackSchedule {
    pub workers: Vec<MaliciousWorker>,
    pub collusion: f64,
    stream: RngStream,
}

impl AttackSchedule {
    pub fn new(workers: Vec<MaliciousWorker>, collusion: f64, stream: RngStream) -> Result<Self> {
        if !(collusion > 0.0 && collusion <= 1.0) {
            return Err(Error::InvalidParameter("collusion fraction must lie in (0, 1]"));
        }
        Ok(Self { workers, collusion, stream })
    }

    pub fn empty(stream: RngStream) -> Self {
        Self { workers: Vec::new(), collusion: 1.0, stream }
    }

    /// Places `floor(fraction * d)` malicious replicas in every stage `2..p-1`,
    /// drawn from the seed. Start iterations are `first_start + i * stagger`
    /// in a seeded order; `specs` is cycled over the workers.
    #[allow(clippy::too_many_arguments)]
    pub fn build(
        stages: usize,
        replicas: usize,
        fraction: f64,
        collusion: f64,
        specs: &[AttackSpec],
        first_start: u64,
        stagger: u64,
        stream: RngStream,
    ) -> Result<Self> {
        if !(0.0..0.5).contains(&fraction) {
            return Err(Error::HonestMajorityViolated);
        }
        let per_stage = libm::floor(fraction * replicas as f64 + 1e-9) as usize;
        if per_stage == 0 || specs.is_empty() || stages < 3 {
            return Self::new(Vec::new(), collusion, stream);
        }
        let mut rng = stream.derive("placement").rng();
        let mut placed = Vec::new();
        for s in 2..stages {
            let mut idx = rng.sample_indices(replicas, per_stage);
            idx.sort_unstable();
            placed.extend(idx.into_iter().map(|r| (s, r)));
        }
        let mut order: Vec<usize> = (0..placed.len()).collect();
        rng.shuffle(&mut order);
        let mut workers = Vec::with_capacity(placed.len());
        for (i, &(stage, replica)) in placed.iter().enumerate() {
            let slot = order.iter().position(|&o| o == i).expect("permutation");
            workers.push(MaliciousWorker {
                stage,
                replica,
                start: first_start + slot as u64 * stagger,
                spec: specs[i % specs.len()],
            });
        }
        Self::new(workers, collusion, stream)
    }

    pub fn is_malicious(&self, stage: usize, replica: usize) -> bool {
        self.workers.iter().any(|w| w.stage == stage && w.replica == replica)
    }

    pub fn worker(&self, stage: usize, replica: usize) -> Option<&MaliciousWorker> {
        self.workers.iter().find(|w| w.stage == stage && w.replica == replica)
    }

    /// Active attackers for `iteration`: `ceil(collusion * |eligible|)` of the
    /// started, unbanned malicious workers, resampled every iteration.
    /// Workers in `removed` (banned or otherwise out of the mesh) are never drawn.
    pub fn active_attackers(&self, iteration: u64, removed: &BTreeSet<(usize, usize)>) -> BTreeSet<(usize, usize)> {
        let eligible: Vec<(usize, usize)> = self
            .workers
            .iter()
            .filter(|w| w.start <= iteration && !removed.contains(&(w.stage, w.replica)))
            .map(|w| (w.stage, w.replica))
            .collect();
        if eligible.is_empty() {
            return BTreeSet::new();
        }
        let k = libm::ceil(self.collusion * eligible.len() as f64 - 1e-9) as usize;
        let k = k.clamp(1, eligible.len());
        let mut rng = self.stream.derive("collusion").index(iteration).rng();
        rng.sample_indices(eligible.len(), k).into_iter().map(|i| eligible[i]).collect()
    }
}
