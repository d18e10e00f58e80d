use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NngpError>;

#[derive(Debug, Error)]
pub enum NngpError {
    /// An argument lies outside the domain of the operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// A configured size or memory budget would be exceeded.
    #[error("resource error: {0}")]
    Resource(String),

    /// A factorization or decomposition failed.
    #[error("numeric error: {0}")]
    Numeric(String),

    /// A result is not representable as a finite `f64`.
    #[error("range error: {0}")]
    Range(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("config error:\n  {}", .0.join("\n  "))]
    Config(Vec<String>),

    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl NngpError {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        NngpError::Domain(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NngpError::Io {
            path: path.into(),
            source,
        }
    }
}
