//! Error taxonomy shared across the crate.
//!
//! Every failure carries a category that the CLI maps onto its exit message;
//! contract violations indicate caller bugs, the rest indicate bad inputs or
//! environment problems.

use std::path::PathBuf;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    /// Incompatible tensor shapes, e.g. matmul inner dimensions.
    #[error("dimension error: {0}")]
    Dimension(String),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// Malformed file content; `line` is 1-based and includes the header.
    #[error("format error: {path}:{line}: {msg}")]
    Format {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    /// Structurally valid input that is semantically unusable.
    #[error("data error: {0}")]
    Data(String),

    /// Invalid configuration value or key.
    #[error("config error: {0}")]
    Config(String),

    /// A statistic is undefined for the given input.
    #[error("statistics error: {0}")]
    Stats(String),

    /// Optimization failure, e.g. non-finite gradients.
    #[error("training error: {0}")]
    Train(String),

    /// A metric is undefined for the given input.
    #[error("metrics error: {0}")]
    Metrics(String),

    #[error("I/O error: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn format(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Format {
            path: path.into(),
            line,
            msg: msg.into(),
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
