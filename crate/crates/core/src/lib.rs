//! Momentum-based verification of pipeline-parallel training signals.
//!
//! The crate is `no_std` (with `alloc`) and contains everything that does not
//! touch the filesystem: a small pipeline-partitioned network with manual
//! backprop, the attack catalogue, the EMA/IQR detector, a fixed DP x PP mesh
//! orchestrator, a SWARM-style stochastic-routing simulator and the closed-form
//! theory bounds. Configuration files, CSV/JSONL emission and the command line
//! live in the `sentinel` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod attacks;
pub mod detector;
pub mod error;
pub mod matrix;
pub mod mesh;
pub mod model;
pub mod numerics;
pub mod swarm;
pub mod theory;

pub use error::{Error, Result};
pub use matrix::Matrix;
pub use numerics::{RngStream, SimRng};
