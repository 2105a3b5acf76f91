use thiserror::Error;

/// Errors produced by the analytic and simulation layers.
#[derive(Error, Debug, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("Jacobi eigensolver did not converge on {what} after {sweeps} sweeps (off-diagonal mass {off:e})")]
    NoConvergence { what: String, sweeps: usize, off: f64 },

    #[error("{what} is singular or indefinite (lambda_min = {lambda_min:e}, lambda_max = {lambda_max:e})")]
    Singular {
        what: String,
        lambda_min: f64,
        lambda_max: f64,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("client learning rate {gamma} outside the valid regime: {reason}")]
    Regime { gamma: f64, reason: String },

    #[error("assumption violated: {0}")]
    Assumption(String),

    #[error("serialization: {0}")]
    Serde(String),

    #[error("io: {0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl From<std::io::Error> for Error {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e.to_string())
    }
}

impl From<serde_json::Error> for Error {
    fn from(e: serde_json::Error) -> Self {
        Error::Serde(e.to_string())
    }
}
