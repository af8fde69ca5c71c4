use thiserror::Error;

/// Errors produced by the library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {context}: expected {expected}, got {actual}")]
    DimensionMismatch {
        context: &'static str,
        expected: usize,
        actual: usize,
    },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("cannot step state at step {step}: horizon is {horizon}")]
    TerminalState { step: usize, horizon: usize },

    #[error("rank deficient caption set: {0}")]
    RankDeficient(String),

    #[error("numeric divergence: {0}")]
    Divergence(String),

    #[error("incompatible checkpoint: {0}")]
    Checkpoint(String),

    #[error("no convergence after {iterations} iterations (last sup-norm change {last_delta:e})")]
    NoConvergence { iterations: usize, last_delta: f64 },

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("replay buffer holds {available} transitions, batch needs {requested}")]
    InsufficientData { available: usize, requested: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn check_len(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::DimensionMismatch {
            context,
            expected,
            actual,
        })
    }
}

pub(crate) fn check_finite(context: &'static str, values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(context))
    }
}
