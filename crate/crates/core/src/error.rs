use std::io;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    /// Malformed input data (scans, PLY files, bitstreams).
    #[error("{0}")]
    Data(String),

    #[error("truncated {what} at offset {offset}")]
    Truncated { what: &'static str, offset: usize },

    #[error("non-finite value at {0}")]
    NonFinite(String),

    #[error("shape error: {0}")]
    Shape(String),

    /// Checkpoint missing, unreadable or incompatible with the stream.
    #[error("model error: {0}")]
    Model(String),

    #[error("invalid argument: {0}")]
    Invalid(String),
}

impl Error {
    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn model(msg: impl Into<String>) -> Self {
        Error::Model(msg.into())
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
