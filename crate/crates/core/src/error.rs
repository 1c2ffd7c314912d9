use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("sequence of length {len} exceeds the positional table ({max})")]
    SequenceTooLong { len: usize, max: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error("missing input {}: {reason}", path.display())]
    MissingInput { path: PathBuf, reason: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    /// Whether the failure stems from bad user input rather than a fault during the run.
    pub fn is_input_error(&self) -> bool {
        !matches!(self, Error::NonFinite(_) | Error::Io(_))
    }
}

pub(crate) fn invalid<S: Into<String>>(msg: S) -> Error {
    Error::InvalidArgument(msg.into())
}
