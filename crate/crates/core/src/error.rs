use std::io;

use thiserror::Error;

/// Errors raised across the retrieval pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("invalid state: {0}")]
    State(String),

    #[error("i/o error: {0}")]
    Io(#[from] io::Error),

    #[error("bad magic in {field}: expected {expected:?}, found {found:?}")]
    BadMagic {
        field: &'static str,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("unsupported {field} version {found} (expected {expected})")]
    UnsupportedVersion {
        field: &'static str,
        expected: u32,
        found: u32,
    },

    #[error("malformed {field}: {reason}")]
    Format { field: &'static str, reason: String },
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidInput(msg.into())
    }

    pub fn format(field: &'static str, reason: impl Into<String>) -> Self {
        Error::Format {
            field,
            reason: reason.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
