use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, NastError>;

#[derive(Debug, Error)]
pub enum NastError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("bad magic in {path}: expected {expected:?}")]
    BadMagic { path: PathBuf, expected: &'static str },

    #[error("unsupported version {found} in {path} (expected {expected})")]
    VersionMismatch {
        path: PathBuf,
        found: u32,
        expected: u32,
    },

    #[error("truncated payload in {path}: header declares {declared} bytes, {available} available")]
    Truncated {
        path: PathBuf,
        declared: u64,
        available: u64,
    },

    #[error("non-finite value at row {row}, column {col}")]
    NonFinite { row: usize, col: usize },

    #[error("malformed manifest line {line}: {message}")]
    Manifest { line: usize, message: String },

    #[error("validation failed for utterance {utterance}: {message}")]
    Validation { utterance: String, message: String },

    #[error("dimension mismatch{}: expected {expected}, found {found}", context_suffix(.context))]
    DimensionMismatch {
        expected: usize,
        found: usize,
        context: String,
    },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("empty input: {0}")]
    Empty(String),

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error("integrity check failed: {0}")]
    Integrity(String),

    #[error("non-finite loss at step {step} in term {term}")]
    NonFiniteLoss { step: u64, term: &'static str },

    #[error("wav error on {path}: {message}")]
    Wav { path: PathBuf, message: String },

    #[error("serialization error: {0}")]
    Serde(String),
}

fn context_suffix(context: &str) -> String {
    if context.is_empty() {
        String::new()
    } else {
        format!(" ({context})")
    }
}

impl NastError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NastError::Io {
            path: path.into(),
            source,
        }
    }

    pub fn dims(expected: usize, found: usize, context: impl Into<String>) -> Self {
        NastError::DimensionMismatch {
            expected,
            found,
            context: context.into(),
        }
    }

    /// Short machine-parsable category, used by the CLI error line.
    pub fn category(&self) -> &'static str {
        match self {
            NastError::Io { .. } => "io",
            NastError::BadMagic { .. } => "bad-magic",
            NastError::VersionMismatch { .. } => "version",
            NastError::Truncated { .. } => "truncated",
            NastError::NonFinite { .. } => "non-finite",
            NastError::Manifest { .. } => "manifest",
            NastError::Validation { .. } => "validation",
            NastError::DimensionMismatch { .. } => "dimension",
            NastError::InvalidParameter(_) => "invalid-parameter",
            NastError::Empty(_) => "empty",
            NastError::ConfigMismatch(_) => "config-mismatch",
            NastError::Integrity(_) => "integrity",
            NastError::NonFiniteLoss { .. } => "non-finite-loss",
            NastError::Wav { .. } => "wav",
            NastError::Serde(_) => "serde",
        }
    }
}

impl From<serde_json::Error> for NastError {
    fn from(e: serde_json::Error) -> Self {
        NastError::Serde(e.to_string())
    }
}
