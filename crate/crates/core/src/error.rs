use std::io;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Tensor or image shapes that the operation cannot combine.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A caller broke an operation's precondition (non-scalar loss, empty model list, ...).
    #[error("contract error: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    /// Malformed binary file. `offset` is the byte position where decoding failed.
    #[error("format error at byte {offset}: {msg}")]
    Format { offset: u64, msg: String },

    #[error("parse error on line {line}: {msg}")]
    Parse { line: usize, msg: String },

    /// No foreground pixels left at the named post-processing stage.
    #[error("empty region at {stage} stage")]
    EmptyRegion { stage: &'static str },

    #[error("ellipse fit error: {0}")]
    Fit(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn dim(msg: impl Into<String>) -> Self {
        Error::Dimension(msg.into())
    }

    pub(crate) fn contract(msg: impl Into<String>) -> Self {
        Error::Contract(msg.into())
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            msg: msg.into(),
        }
    }
}
