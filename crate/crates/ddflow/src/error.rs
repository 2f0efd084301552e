//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    /// Malformed input file; `offset` is the byte position where parsing failed.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },

    /// Structurally valid file with the wrong magic/version/architecture.
    #[error("format error: {0}")]
    Format(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    /// Domain violation: class out of range, invalid probability table, bad
    /// hyperparameter, non-finite value where one is required.
    #[error("invalid value: {0}")]
    Invalid(String),

    #[error("config error: {0}")]
    Config(String),

    /// Container was produced by a different model than the one supplied.
    #[error("model hash mismatch: container has {container:08x}, model has {model:08x}")]
    HashMismatch { container: u32, model: u32 },

    /// Compressed payload failed an integrity check during decoding.
    #[error("corrupt payload: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn parse(offset: u64, msg: impl Into<String>) -> Self {
        Error::Parse { offset, msg: msg.into() }
    }
}
