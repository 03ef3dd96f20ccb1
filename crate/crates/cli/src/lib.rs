//! Experiment files, run orchestration and result bundles for the
//! `sentinel-core` simulators.

pub mod bundle;
pub mod config;
pub mod runner;

pub use bundle::{Bundle, SummaryRow};
pub use config::{parse_config, parse_str, ConfigError, ExperimentConfig, Mode};
pub use runner::{run, sweep, RunError, RunOutput};
