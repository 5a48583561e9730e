use thiserror::Error;

use crate::solvers::ConvergenceTrace;

/// Errors reported by problem construction, solvers and estimators.
#[derive(Debug, Error)]
pub enum SedjocoError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("{0} is numerically singular")]
    Singular(String),

    #[error("matrix set {index} is not positive definite (min eigenvalue {lambda_min:.3e})")]
    NotPositiveDefinite { index: usize, lambda_min: f64 },

    #[error("invalid permutation {perm:?} for size {size}")]
    InvalidPermutation { perm: Vec<usize>, size: usize },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("solver failed to make progress: {message}")]
    NonConvergence {
        message: String,
        /// Iteration history up to the failure, when one was recorded.
        trace: Option<Box<ConvergenceTrace>>,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SedjocoError>;
