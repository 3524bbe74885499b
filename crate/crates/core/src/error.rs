use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the landmark discovery pipeline.
#[derive(Debug, Error)]
pub enum UldError {
    #[error("backbone adapter '{name}' is unavailable: {reason}")]
    AdapterUnavailable { name: String, reason: String },

    #[error("shape mismatch in {context}: expected {expected}, got {actual}")]
    ShapeMismatch {
        context: &'static str,
        expected: String,
        actual: String,
    },

    #[error("configuration error: {0}")]
    Config(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("feature cache {path}: {message} (at byte offset {offset})")]
    CacheFormat {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("checkpoint {path}: {message}")]
    Checkpoint { path: PathBuf, message: String },

    #[error("checkpoint config hash mismatch: archive has {stored}, current config is {current}")]
    ConfigHashMismatch { stored: String, current: String },

    #[error("{stage} training diverged at iteration {iteration}: loss '{term}' is not finite")]
    Diverged {
        stage: String,
        iteration: usize,
        term: String,
    },

    #[error("stage '{stage}' requires the '{missing}' stage checkpoint, which was not found under {run_dir}")]
    MissingPrerequisite {
        stage: String,
        missing: String,
        run_dir: PathBuf,
    },

    #[error("manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("image {path}: {message}")]
    Image { path: PathBuf, message: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("serialization error: {0}")]
    Serde(#[from] serde_json::Error),
}

impl UldError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        UldError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn shape(context: &'static str, expected: impl ToString, actual: impl ToString) -> Self {
        UldError::ShapeMismatch {
            context,
            expected: expected.to_string(),
            actual: actual.to_string(),
        }
    }
}

pub type Result<T> = std::result::Result<T, UldError>;
