use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("integration step too coarse: dt = {dt} s exceeds {limit} s")]
    StepTooCoarse { dt: f64, limit: f64 },

    #[error("plant not calibratable at this operating point: {0}")]
    NotCalibratable(String),

    #[error("response not settled: {0}")]
    NotSettled(String),

    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },

    #[error("tape was recorded against parameter version {tape}, network is at version {current}")]
    StaleTape { tape: u64, current: u64 },

    #[error("gain outside reparameterization domain: {0}")]
    GainDomain(String),

    #[error("undefined metric: {0}")]
    UndefinedMetric(&'static str),

    #[error("config: {0}")]
    Config(String),

    #[error("malformed data file {path}: {msg}")]
    DataFile { path: PathBuf, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub(crate) fn ensure_finite(value: f64, what: &'static str) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonFinite(what))
    }
}
