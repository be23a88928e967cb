use std::io;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported datatype: {0}")]
    UnsupportedDatatype(String),

    #[error("point {0:?} lies outside the volume")]
    OutOfBounds([f64; 3]),

    #[error("degenerate streamline: {0}")]
    DegenerateStreamline(String),

    #[error("dataset is empty after filtering")]
    EmptyDataset,

    #[error("tractogram is empty")]
    EmptyTractogram,

    #[error("usage error: {0}")]
    Usage(String),

    #[error("non-finite value: {0}")]
    NonFinite(String),

    #[error("configuration mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(msg: impl Into<String>) -> Self {
        Error::Format(msg.into())
    }
}
