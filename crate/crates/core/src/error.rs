use thiserror::Error;

/// Errors raised by the solvers, models and numerical utilities.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("coordinate {x} lies outside [{a}, {b}]")]
    OutOfDomain { x: f64, a: f64, b: f64 },

    #[error("no convergence after {iterations} iterations (last residual {residual:e})")]
    ConvergenceFailure { iterations: usize, residual: f64 },

    #[error("numerical failure: {reason} (condition estimate {condition:e})")]
    NumericalFailure { reason: String, condition: f64 },

    #[error("training diverged at epoch {epoch} (loss {loss})")]
    TrainingFailure { epoch: usize, loss: f64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::InvalidArgument(msg.into()))
}
