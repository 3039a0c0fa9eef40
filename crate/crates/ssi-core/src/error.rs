use thiserror::Error;

/// Errors reported by the library.
#[derive(Debug, Error)]
pub enum SsiError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("factorization failed: non-positive pivot at index {pivot} (value {value:.3e}); retry with a larger regularization")]
    Factorization { pivot: usize, value: f64 },

    #[error("implicit solve did not converge after {iterations} iterations (last residual {residual:.3e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("integration failed at step {step}: {source}")]
    StepFailure {
        step: usize,
        #[source]
        source: Box<SsiError>,
    },

    #[error("truncation order {order} is not available for {integrator}")]
    UnsupportedOrder { order: u8, integrator: String },

    #[error("parse error at line {line}, column {column}: {message}")]
    Parse {
        line: u64,
        column: u64,
        message: String,
    },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, SsiError>;

impl SsiError {
    pub(crate) fn dims(expected: usize, got: usize) -> Self {
        SsiError::DimensionMismatch { expected, got }
    }
}
