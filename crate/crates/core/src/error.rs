use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = AppealError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum AppealError {
    /// A config or manifest file could not be parsed.
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },

    /// A value violates a documented invariant.
    #[error("invalid `{field}`: {message}")]
    Validation { field: String, message: String },

    #[error("backend `{role}` failed{}: {message}", if *.retryable { " (retryable)" } else { "" })]
    Backend {
        role: String,
        message: String,
        retryable: bool,
    },

    #[error("no implementation bound for role `{role}`; available: {available}")]
    Unbound { role: String, available: String },

    #[error("dimension mismatch: expected {expected:?}, got {actual:?}")]
    DimensionMismatch {
        expected: (usize, usize),
        actual: (usize, usize),
    },

    #[error("{0}")]
    Training(String),

    #[error("correlation undefined: {0}")]
    Undefined(String),

    #[error("stage `{stage}` requires {missing}; run `appeal {prerequisite}` first")]
    MissingPrerequisite {
        stage: String,
        missing: PathBuf,
        prerequisite: String,
    },

    #[error("stage `{stage}` failed: {message}")]
    Stage { stage: String, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl AppealError {
    pub fn validation(field: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Validation {
            field: field.into(),
            message: message.into(),
        }
    }

    pub fn backend(role: impl Into<String>, message: impl Into<String>) -> Self {
        Self::Backend {
            role: role.into(),
            message: message.into(),
            retryable: true,
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }

    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Backend { retryable: true, .. })
    }
}
