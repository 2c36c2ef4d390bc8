use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid problem specification: {0}")]
    InvalidSpec(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("one-step invariance margin leaves an empty region in dimension {dim}")]
    InfeasibleInvariance { dim: usize },

    #[error("point {point:?} lies outside the admissible domain")]
    Domain { point: Vec<f64> },

    #[error("fixed-point iteration did not converge within {cap} sweeps (last change {last_change:e})")]
    NonConvergence { cap: usize, last_change: f64 },

    #[error("training diverged at iteration {iteration}: loss = {loss}")]
    Diverged {
        iteration: usize,
        loss: f64,
        trace: Vec<f64>,
    },

    #[error("certification indeterminate after {boxes} boxes: {reason}")]
    Indeterminate { boxes: u64, reason: String },

    #[error("expression error: {0}")]
    Expr(String),

    #[error("SMT-LIB parse error: {0}")]
    Parse(String),

    #[error("certificate inconsistent: {0}")]
    Certificate(String),

    #[error("unknown system `{0}`")]
    UnknownSystem(String),

    #[error("format version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
