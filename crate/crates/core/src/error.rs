use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid parameters or inconsistent dimensions, detected before any work is done.
    #[error("configuration error: {0}")]
    Config(String),

    #[error("insufficient samples: need at least {needed}, got {got}")]
    InsufficientSamples { needed: usize, got: usize },

    #[error("reduction error: {0}")]
    Reduction(String),

    #[error("domain error: {0}")]
    Domain(String),

    #[error("simulation blew up on path {path} at step {step}")]
    Simulation { path: usize, step: usize },

    #[error("solver error at time index {step}: {reason}")]
    Solver { step: usize, reason: String },

    #[error("oracle error: {0}")]
    Oracle(String),

    #[error("lookup error: {0}")]
    Lookup(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
