//! Crate-wide error type.
//!
//! Every variant carries a context string that names the module and the
//! offending field or file, so a failure surfaced at the CLI identifies
//! where it came from.

use thiserror::Error;

/// Errors produced by any module in this crate.
#[derive(Debug, Error)]
pub enum Error {
    /// A parameter or configuration value failed validation.
    #[error("invalid parameter: {0}")]
    Parameter(String),

    /// Array dimensions do not agree.
    #[error("shape mismatch: {0}")]
    Shape(String),

    /// A numeric computation failed (overflow, divergence, non-finite values).
    #[error("numerical failure: {0}")]
    Numerical(String),

    /// A file failed an integrity check (magic, CRC, truncation).
    #[error("integrity check failed: {0}")]
    Integrity(String),

    /// An operating-system I/O failure.
    #[error("i/o failure: {context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn parameter(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub fn shape(msg: impl Into<String>) -> Self {
        Error::Shape(msg.into())
    }

    pub fn numerical(msg: impl Into<String>) -> Self {
        Error::Numerical(msg.into())
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Error::Integrity(msg.into())
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
