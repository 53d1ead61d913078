use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = HamrError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum HamrError {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("non-finite value in loss term `{term}`: {value}")]
    InvalidState { term: &'static str, value: f64 },

    #[error("failed to parse {what}: {msg}")]
    Parse { what: String, msg: String },

    #[error("unsupported model version `{found}` (expected `{expected}`)")]
    Version { found: String, expected: &'static str },

    #[error("model validation failed: {0}")]
    Validation(String),

    #[error("{path}: line {line}: {msg}")]
    Dataset { path: PathBuf, line: usize, msg: String },

    #[error("referenced file {path} could not be loaded: {msg}")]
    MissingFile { path: PathBuf, msg: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl HamrError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        HamrError::InvalidArgument(msg.into())
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HamrError::Io { path: path.into(), source }
    }
}
