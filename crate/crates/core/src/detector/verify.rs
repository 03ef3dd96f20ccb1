use crate::error::Result;
use crate::matrix::Matrix;

use super::metrics::{metric_l1, metric_l2_whitened, metric_sfr, metric_sw, metric_sw_projected, Metric, SwProjector};
use super::threshold::{adapt_thresholds, is_severe, tukey_flag, DeviationHistory, ThresholdParams, ThresholdState};

/// Detector settings shared by the mesh and swarm orchestrators.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VerifierConfig {
    pub enabled: bool,
    pub beta_h: f64,
    pub beta_g: f64,
    /// History length in iterations.
    pub window: usize,
    pub max_violations: u32,
    pub forgiveness: u64,
    pub threshold: ThresholdParams,
    /// `0` selects the coordinate reading of the sliced distance.
    pub n_proj: usize,
    /// Fences pinned at infinity (instrumentation runs).
    pub unbounded: bool,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            beta_h: 0.9,
            beta_g: 0.8,
            window: 100,
            max_violations: 5,
            forgiveness: 100,
            threshold: ThresholdParams::default(),
            n_proj: 0,
            unbounded: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Clean,
    Flagged,
    Severe,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::Clean => "clean",
            Outcome::Flagged => "flagged",
            Outcome::Severe => "severe",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Verdict {
    /// Indexed by [`Metric::index`].
    pub gammas: [f64; 4],
    pub flagged: [bool; 4],
    pub severe: Option<Metric>,
}

impl Verdict {
    pub fn outcome(&self) -> Outcome {
        if self.severe.is_some() {
            Outcome::Severe
        } else if self.flagged.iter().any(|f| *f) {
            Outcome::Flagged
        } else {
            Outcome::Clean
        }
    }

    pub fn is_clean(&self) -> bool {
        self.outcome() == Outcome::Clean
    }

    /// The metric reported for events: the severe one, else the first flagged.
    pub fn lead_metric(&self) -> Option<Metric> {
        self.severe.or_else(|| Metric::ALL.into_iter().find(|m| self.flagged[m.index()]))
    }
}

/// All four deviations of a batch payload against a reference vector.
/// Batches are reduced to their row mean except by the projected distance.
pub fn deviations(x: &Matrix, ema: &[f64], proj: Option<&SwProjector>) -> Result<[f64; 4]> {
    let reduced = x.mean_rows();
    let sw = match proj {
        Some(p) if !p.is_empty() => metric_sw_projected(x, &Matrix::broadcast_row(ema, x.rows()), p)?,
        _ => metric_sw(&reduced, ema)?,
    };
    Ok([metric_l1(&reduced, ema)?, metric_l2_whitened(&reduced, ema)?, metric_sfr(&reduced, ema)?, sw])
}

/// Scores `x` against `ema` and the per-metric fences.
pub fn verify_signal(
    x: &Matrix,
    ema: &[f64],
    thresholds: &[ThresholdState; 4],
    proj: Option<&SwProjector>,
) -> Result<Verdict> {
    let gammas = deviations(x, ema, proj)?;
    judge(gammas, thresholds)
}

pub fn judge(gammas: [f64; 4], thresholds: &[ThresholdState; 4]) -> Result<Verdict> {
    let mut flagged = [false; 4];
    let mut severe = None;
    for m in Metric::ALL {
        let i = m.index();
        let g = gammas[i];
        // A non-finite deviation can never be benign.
        let nonfinite = !g.is_finite();
        flagged[i] = nonfinite || tukey_flag(g, &thresholds[i])?;
        if flagged[i] && severe.is_none() && (nonfinite || is_severe(g, &thresholds[i])?) {
            severe = Some(m);
        }
    }
    Ok(Verdict { gammas, flagged, severe })
}

/// Histories and fences for one signal stream.
#[derive(Debug, Clone, PartialEq)]
pub struct SignalMonitor {
    pub histories: [DeviationHistory; 4],
    pub thresholds: [ThresholdState; 4],
    unbounded: bool,
}

impl SignalMonitor {
    pub fn new(capacity: usize, cfg: &VerifierConfig) -> Self {
        let th =
            if cfg.unbounded { ThresholdState::unbounded() } else { ThresholdState::uninitialized(cfg.threshold.k0) };
        Self {
            histories: core::array::from_fn(|_| DeviationHistory::new(capacity)),
            thresholds: [th; 4],
            unbounded: cfg.unbounded,
        }
    }

    pub fn is_ready(&self) -> bool {
        self.thresholds.iter().all(|t| t.initialized)
    }

    pub fn push(&mut self, gammas: &[f64; 4]) {
        for (h, g) in self.histories.iter_mut().zip(gammas) {
            h.push(*g);
        }
    }

    /// Re-runs the fence search on every non-empty history.
    pub fn adapt(&mut self, params: &ThresholdParams) -> Result<()> {
        if self.unbounded {
            return Ok(());
        }
        for m in Metric::ALL {
            let i = m.index();
            if self.histories[i].is_empty() {
                continue;
            }
            let prev_k = self.thresholds[i].k;
            self.thresholds[i] = adapt_thresholds(&self.histories[i].to_vec(), prev_k, params, m)?;
        }
        Ok(())
    }

    pub fn verify(&self, x: &Matrix, ema: &[f64], proj: Option<&SwProjector>) -> Result<Verdict> {
        verify_signal(x, ema, &self.thresholds, proj)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::RngStream;
    use alloc::vec;
    use alloc::vec::Vec;

    fn warmed(cfg: &VerifierConfig, ema: &[f64], noise: f64) -> SignalMonitor {
        let mut mon = SignalMonitor::new(200, cfg);
        let mut rng = RngStream::new(9, "warm").rng();
        for _ in 0..200 {
            let x: Vec<f64> = ema.iter().map(|v| v + noise * rng.normal()).collect();
            let g = deviations(&Matrix::from_vec(1, x.len(), x).unwrap(), ema, None).unwrap();
            mon.push(&g);
        }
        mon.adapt(&cfg.threshold).unwrap();
        mon
    }

    #[test]
    fn x_equal_ema_is_clean_with_zero_gammas() {
        let ema = vec![0.5, -0.25, 0.75, 1.0];
        let g = deviations(&Matrix::from_vec(1, 4, ema.clone()).unwrap(), &ema, None).unwrap();
        assert_eq!(g, [0.0; 4]);
        let cfg = VerifierConfig::default();
        let mon = warmed(&cfg, &ema, 0.0);
        let v = mon.verify(&Matrix::from_vec(1, 4, ema.clone()).unwrap(), &ema, None).unwrap();
        assert!(v.is_clean());
    }

    #[test]
    fn constant_zero_against_nonzero_ema_flags_l1() {
        let ema: Vec<f64> = (0..16).map(|i| 0.5 + 0.05 * f64::from(i)).collect();
        let cfg = VerifierConfig::default();
        let mon = warmed(&cfg, &ema, 0.01);
        let v = mon.verify(&Matrix::zeros(1, 16), &ema, None).unwrap();
        assert!(v.flagged[Metric::L1.index()]);
        assert_ne!(v.outcome(), Outcome::Clean);
    }

    #[test]
    fn negated_ema_flags_sfr() {
        let ema: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 0.4 } else { -0.3 }).collect();
        let cfg = VerifierConfig::default();
        let mon = warmed(&cfg, &ema, 0.01);
        assert!(mon.thresholds[Metric::Sfr.index()].upper < 1.0);
        let neg: Vec<f64> = ema.iter().map(|v| -v).collect();
        let v = mon.verify(&Matrix::from_vec(1, 16, neg).unwrap(), &ema, None).unwrap();
        assert_eq!(v.gammas[Metric::Sfr.index()], 1.0);
        assert!(v.flagged[Metric::Sfr.index()]);
    }

    #[test]
    fn unbounded_monitor_never_flags() {
        let cfg = VerifierConfig { unbounded: true, ..VerifierConfig::default() };
        let mon = SignalMonitor::new(10, &cfg);
        let v = mon.verify(&Matrix::from_vec(1, 2, vec![1e6, -1e6]).unwrap(), &[0.1, 0.2], None).unwrap();
        assert!(v.is_clean());
    }

    #[test]
    fn severe_implies_flagged() {
        let ema = vec![1.0; 8];
        let cfg = VerifierConfig::default();
        let mon = warmed(&cfg, &ema, 0.01);
        let v = mon.verify(&Matrix::from_vec(1, 8, vec![1e4; 8]).unwrap(), &ema, None).unwrap();
        assert_eq!(v.outcome(), Outcome::Severe);
        let m = v.severe.unwrap();
        assert!(v.flagged[m.index()]);
    }
}
