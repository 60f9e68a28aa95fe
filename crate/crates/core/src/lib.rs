//! Reinforcement-learning auto-tuning of a PID level controller on a
//! simulated two-tank process.

pub mod baselines;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod pid;
pub mod plant;
pub mod reward;
pub mod td3;

pub use error::{Error, Result};
