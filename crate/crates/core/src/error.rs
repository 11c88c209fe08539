//! Error type shared across the solver kit.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum CoreError {
    /// A caller violated an operation precondition (bad shape, bad range, ...).
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A named entity (boundary tag, parameter, case id) does not exist.
    #[error("not found: {0}")]
    NotFound(String),

    /// Assembly produced an unsolvable system; the message names the offending mode.
    #[error("assembly error: {0}")]
    Assembly(String),

    /// A linear solve failed to reach the requested residual.
    #[error("solver failed after {iterations} iterations, residual {residual:e}")]
    Solver { iterations: usize, residual: f64 },

    /// Training produced a non-finite loss or gradient.
    #[error("training diverged at epoch {epoch}: {detail}")]
    TrainingDiverged { epoch: usize, detail: String },

    /// The coupling channel was driven out of its write-strain/read-field alternation.
    #[error("channel protocol violation: {0}")]
    Protocol(String),

    /// A binary or text artifact is malformed.
    #[error("format error: {0}")]
    Format(String),

    /// Configuration chain mismatch (checkpoint vs dataset vs mesh).
    #[error("config error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CoreError>;

impl CoreError {
    pub fn invalid(msg: impl Into<String>) -> Self {
        CoreError::InvalidArgument(msg.into())
    }

    pub fn not_found(msg: impl Into<String>) -> Self {
        CoreError::NotFound(msg.into())
    }
}
