use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Argument outside the admissible domain of an operation.
    #[error("domain error: {0}")]
    Domain(String),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("at least {required} samples are required, got {found}")]
    TooFewSamples { required: usize, found: usize },

    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    /// Cholesky failed even after the largest diagonal jitter.
    #[error("covariance matrix is not positive definite (relative jitter {jitter:e} attempted)")]
    NotPositiveDefinite { jitter: f64 },

    #[error("simulation {index} failed: {source}")]
    Simulation {
        index: usize,
        #[source]
        source: Box<Error>,
    },

    #[error("training diverged at epoch {epoch}, batch {batch} (seed {seed})")]
    Divergence { epoch: usize, batch: usize, seed: u64 },

    #[error("evaluation error: {0}")]
    Evaluation(String),

    #[error("optimizer failed: {0}")]
    Optimizer(String),

    /// GEV support condition `1 + γ(z − μ)/σ > 0` violated; cells are (year index, row, col).
    #[error("GEV support violated at {} cell(s), first: {:?}", cells.len(), cells.first())]
    Support { cells: Vec<(usize, usize, usize)> },

    #[error("invalid data in {path:?}: {message}")]
    Format { path: PathBuf, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }

    pub(crate) fn format(path: impl Into<PathBuf>, message: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            message: message.into(),
        }
    }
}
