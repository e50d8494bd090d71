use thiserror::Error;

use crate::persistence::FormatError;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("corrupt ternary matrix: {0}")]
    CorruptMatrix(String),

    /// A pixel is not covered by any patch during reassembly.
    #[error("pixel ({x}, {y}) is not covered by any patch")]
    UncoveredPixel { x: usize, y: usize },

    /// Backward was handed a cache that does not belong to the batch.
    #[error("stale activation cache: {0}")]
    StaleCache(String),

    #[error(transparent)]
    Format(#[from] FormatError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub(crate) fn dim_err(msg: impl Into<String>) -> Error {
    Error::DimensionMismatch(msg.into())
}

pub(crate) fn arg_err(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
