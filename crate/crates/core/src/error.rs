use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("length mismatch: {what} has {got} entries, expected {expected}")]
    LengthMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },

    #[error("checksum mismatch for {file}")]
    Checksum { file: String },

    #[error("format error: {0}")]
    Format(String),

    #[error("non-finite value at index {index}")]
    NonFinite { index: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("numeric failure: {0}")]
    Numeric(String),

    #[error("bitstream truncated: needed {needed} more bits at bit {position}")]
    Truncated { position: usize, needed: usize },

    #[error("invalid prefix code: {0}")]
    InvalidCode(String),

    #[error("constraint infeasible: {0}")]
    Infeasible(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
