use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HaflError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HaflError {
    #[error("dimension `{name}` must be at least 1")]
    ZeroDimension { name: &'static str },

    #[error("{what} index {index} out of range (limit {limit})")]
    IndexOutOfRange {
        what: &'static str,
        index: usize,
        limit: usize,
    },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("{0} is empty")]
    Empty(&'static str),

    #[error("plan mode mismatch: expected {expected}, got {actual}")]
    ModeMismatch {
        expected: &'static str,
        actual: &'static str,
    },

    #[error("protocol violation: {0}")]
    Protocol(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("config key `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON encoding failed: {0}")]
    Json(#[from] serde_json::Error),

    #[error("thread pool: {0}")]
    ThreadPool(String),
}

impl HaflError {
    pub(crate) fn shape(
        context: &'static str,
        expected: impl std::fmt::Display,
        actual: impl std::fmt::Display,
    ) -> Self {
        HaflError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }

    pub fn config(key: impl Into<String>, message: impl Into<String>) -> Self {
        HaflError::Config {
            key: key.into(),
            message: message.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HaflError::Io {
            path: path.into(),
            source,
        }
    }
}
