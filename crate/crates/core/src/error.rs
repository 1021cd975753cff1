use std::path::PathBuf;

use thiserror::Error;

/// Errors produced anywhere in the pretraining / probing pipeline.
#[derive(Debug, Error)]
pub enum XitError {
    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("{0} contains no series")]
    EmptyDataset(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("shape mismatch in {op}: expected {expected}, found {found}")]
    Shape {
        op: &'static str,
        expected: String,
        found: String,
    },

    #[error("non-finite value produced by {0}")]
    NonFinite(String),

    #[error("training diverged at step {step}: {reason}")]
    Diverged { step: usize, reason: String },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("config error at `{key}`: {message}")]
    Config { key: String, message: String },

    #[error("unknown {kind} `{name}` (known: {known})")]
    UnknownName {
        kind: &'static str,
        name: String,
        known: String,
    },

    #[error("incomplete input: {0}")]
    Incomplete(String),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl XitError {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        XitError::InvalidArgument(msg.into())
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        XitError::Io {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by configuration or input files rather than by
    /// the computation itself.
    pub fn is_input_error(&self) -> bool {
        matches!(
            self,
            XitError::Parse { .. }
                | XitError::EmptyDataset(_)
                | XitError::Io { .. }
                | XitError::Config { .. }
                | XitError::UnknownName { .. }
                | XitError::Incomplete(_)
                | XitError::Json(_)
                | XitError::Checkpoint(_)
        )
    }
}

pub type Result<T> = std::result::Result<T, XitError>;
