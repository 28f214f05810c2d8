use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("input shape mismatch: expected {expected:?}, got {actual:?}")]
    InputShape {
        expected: Vec<usize>,
        actual: Vec<usize>,
    },

    #[error("empty batch")]
    EmptyBatch,

    #[error("batch too small: need at least {min} examples, got {actual}")]
    BatchTooSmall { min: usize, actual: usize },

    #[error("invalid partition: {0}")]
    InvalidPartition(String),

    #[error("invalid parameter: {0}")]
    Parameter(String),

    #[error("subsample mask does not match the model: {0}")]
    MaskMismatch(String),

    #[error("gradient bundles are not compatible: {0}")]
    Aggregation(String),

    #[error("sampling failed: {0}")]
    Sampling(String),

    #[error("detection metric not applicable: {0}")]
    Inapplicable(String),

    #[error("fixture construction reached factor {achieved:.3} (< {required})")]
    Fixture { achieved: f64, required: f64 },

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("training diverged at epoch {epoch}, step {step}")]
    Diverged { epoch: usize, step: usize },

    #[error("architecture mismatch: {0}")]
    Architecture(String),

    #[error("invalid config field `{field}`: {reason}")]
    Config { field: String, reason: String },

    #[error("malformed file {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn param(msg: impl Into<String>) -> Self {
        Error::Parameter(msg.into())
    }

    pub(crate) fn config(field: impl Into<String>, reason: impl Into<String>) -> Self {
        Error::Config {
            field: field.into(),
            reason: reason.into(),
        }
    }
}
