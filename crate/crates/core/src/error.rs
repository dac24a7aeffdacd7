use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = PclvError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum PclvError {
    #[error("{path}: line {line}: {message}")]
    Parse {
        path: PathBuf,
        line: u64,
        message: String,
    },

    #[error("{path}: header mismatch: expected `{expected}`, found `{found}`")]
    Header {
        path: PathBuf,
        expected: String,
        found: String,
    },

    #[error("unknown PSC token `{token}`; valid tokens are {valid}")]
    UnknownPsc { token: String, valid: String },

    #[error("invalid value for `{field}`: {message}")]
    InvalidConfig { field: String, message: String },

    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("feature arity mismatch: model expects {expected}, got {found}")]
    Arity { expected: usize, found: usize },

    #[error("unsupported model file version {found} (reader supports {supported})")]
    Version { found: String, supported: String },

    #[error("numerical failure: {0}")]
    Numerical(String),

    #[error("missing input files: {}", .0.iter().map(|p| p.display().to_string()).collect::<Vec<_>>().join(", "))]
    MissingInputs(Vec<PathBuf>),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl PclvError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        PclvError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(field: &str, message: impl Into<String>) -> Self {
        PclvError::InvalidConfig {
            field: field.to_string(),
            message: message.into(),
        }
    }

    pub(crate) fn input(message: impl Into<String>) -> Self {
        PclvError::InvalidInput(message.into())
    }

    /// True for errors caused by the caller's configuration or arguments
    /// rather than by a runtime failure.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            PclvError::InvalidConfig { .. } | PclvError::MissingInputs(_)
        )
    }
}
