//! Crate-wide error type.
//!
//! Variants map one-to-one onto the CLI exit-code contract: configuration
//! problems exit with 1, data/ingestion problems with 2, numerical failures
//! with 3 and filesystem failures with 4.

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration or mismatched dimensions between inputs.
    #[error("configuration error: {0}")]
    Config(String),

    /// A config document failed validation at a specific JSON pointer.
    #[error("invalid config at {pointer}: {message}")]
    Validation { pointer: String, message: String },

    /// Malformed or inconsistent input data.
    #[error("data error in {source_name}: {message}")]
    Data {
        source_name: String,
        message: String,
    },

    /// A computation produced a non-finite value.
    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }

    pub fn validation(pointer: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Validation {
            pointer: pointer.into(),
            message: message.into(),
        }
    }

    pub fn data(source_name: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Data {
            source_name: source_name.into(),
            message: message.into(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for this error class.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Validation { .. } => 1,
            Error::Data { .. } => 2,
            Error::Numeric(_) => 3,
            Error::Io { .. } => 4,
        }
    }
}
