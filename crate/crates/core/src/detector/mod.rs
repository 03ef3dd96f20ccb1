//! Momentum-based verification: EMA references, distance metrics, adaptive
//! Tukey fences, verdicts and the violation ledger.

mod ema;
mod ledger;
mod metrics;
mod threshold;
mod verify;

pub use ema::{ema_update, EmaState};
pub use ledger::{LedgerAction, VerdictLedger, WorkerRecord};
pub use metrics::{metric_l1, metric_l2_whitened, metric_sfr, metric_sw, metric_sw_projected, Metric, SwProjector};
pub use threshold::{adapt_thresholds, is_severe, tukey_flag, DeviationHistory, ThresholdParams, ThresholdState};
pub use verify::{deviations, judge, verify_signal, Outcome, SignalMonitor, Verdict, VerifierConfig};
