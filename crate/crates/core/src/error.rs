use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: {left} vs {right}")]
    DimensionMismatch {
        context: &'static str,
        left: usize,
        right: usize,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("non-finite value encountered at iteration {iteration}")]
    NonFinite { iteration: u64 },

    #[error("dataset is empty")]
    EmptyDataset,

    #[error("parse error in {path} at {location}: {message}")]
    Parse {
        path: PathBuf,
        location: String,
        message: String,
    },

    #[error("value {value} at column {column}, row {row} is outside [0, 1]")]
    RangeViolation {
        value: f64,
        column: usize,
        row: usize,
    },

    #[error("bad checkpoint: {0}")]
    Checkpoint(String),

    #[error("shape mismatch: expected {expected}, found {found}")]
    ShapeMismatch { expected: String, found: String },

    #[error("Lyapunov equation has no unique solution: {0}")]
    Lyapunov(String),

    #[error("relative difference power undefined: both estimates equal the minimizer")]
    ZeroDenominator,

    #[error("objective does not provide {0}")]
    Unavailable(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn check_len(context: &'static str, left: usize, right: usize) -> Result<()> {
    if left == right {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            left,
            right,
        })
    }
}
