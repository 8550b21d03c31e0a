use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = BmnError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum BmnError {
    #[error("format error in {path}: {msg}")]
    Format { path: PathBuf, msg: String },

    #[error("truncated payload in {path}: expected {expected} bytes, found {found}")]
    Truncation {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("validation error: {0}")]
    Validation(String),

    #[error("no annotation entry for video `{0}`")]
    Lookup(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("empty input: {0}")]
    EmptyInput(String),

    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("synthetic generation failed: {0}")]
    Generation(String),

    #[error(
        "non-finite loss at epoch {epoch}, batch {batch} (tem={tem}, pem={pem}, l2={l2})"
    )]
    NonFiniteLoss {
        epoch: usize,
        batch: usize,
        tem: f64,
        pem: f64,
        l2: f64,
    },

    #[error("checkpoint error: {0}")]
    Checkpoint(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("JSON error in {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl BmnError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        BmnError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        BmnError::Json {
            path: path.into(),
            source,
        }
    }

    /// True for errors caused by the caller's configuration or arguments
    /// rather than by a failure while running.
    pub fn is_usage(&self) -> bool {
        matches!(
            self,
            BmnError::Config(_) | BmnError::Parameter(_) | BmnError::Json { .. }
        )
    }
}
