//! Error types shared across the crate.

use thiserror::Error;

#[derive(Error, Debug)]
pub enum Error {
    /// Tensor shapes do not line up for an operation.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dim {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// Invalid configuration (bad hyperparameter, kernel extent, k range, ...).
    #[error("config error: {0}")]
    Config(String),

    /// Invalid data (labels out of range, degenerate geometry, mixed sizes, ...).
    #[error("data error: {0}")]
    Data(String),

    /// A file failed to parse.
    #[error("parse error at {path}:{line}: {msg}")]
    Parse {
        path: String,
        line: usize,
        msg: String,
    },

    /// Training failed (nonfinite gradients and the like).
    #[error("training error: {0}")]
    Train(String),

    /// Checkpoint file problems: bad magic, version, or parameter mismatch.
    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    /// A contract the implementation itself guarantees was violated.
    #[error("internal error: {0}")]
    Internal(String),

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn data(msg: impl Into<String>) -> Self {
        Error::Data(msg.into())
    }

    pub fn internal(msg: impl Into<String>) -> Self {
        Error::Internal(msg.into())
    }
}
