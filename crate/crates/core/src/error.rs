use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// An attention query row had every key masked out.
    #[error("attention row {row} is fully masked")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value in {what}")]
    NonFinite { what: String },

    /// Context-parallel message bus violation.
    #[error("protocol error: {0}")]
    Protocol(String),

    #[error("example {index} has {len} tokens, exceeding capacity {capacity}")]
    Oversized {
        index: usize,
        len: usize,
        capacity: usize,
    },

    #[error("training diverged at step {step}: loss {loss} exceeded 10x initial {initial}")]
    Diverged { step: usize, loss: f64, initial: f64 },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("config: {0}")]
    Config(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn non_finite(what: impl Into<String>) -> Self {
        Error::NonFinite { what: what.into() }
    }
}
