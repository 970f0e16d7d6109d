use std::io;

use thiserror::Error;

use crate::data::idx::IdxError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("hash mismatch for {file}: expected {expected}, got {actual}")]
    HashMismatch {
        file: String,
        expected: String,
        actual: String,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("network failure fetching {url}: {reason}")]
    Network { url: String, reason: String },

    #[error("training diverged at step {step} ({phase}): {detail}")]
    Divergence {
        step: u64,
        phase: String,
        detail: String,
    },

    #[error("argument outside domain: {0}")]
    Domain(String),

    #[error("support violation: {0}")]
    Support(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}
