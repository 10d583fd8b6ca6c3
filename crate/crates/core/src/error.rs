use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = NfsError> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum NfsError {
    #[error("{op}: shape mismatch in {dim}: expected {expected}, got {actual}")]
    ShapeMismatch {
        op: &'static str,
        dim: String,
        expected: String,
        actual: String,
    },

    #[error("{op}: degenerate output size {height}x{width}")]
    DegenerateOutput {
        op: &'static str,
        height: isize,
        width: isize,
    },

    #[error("{op}: degenerate batch: {reason}")]
    DegenerateBatch { op: &'static str, reason: String },

    #[error("{op}: argument {value} outside domain {domain}")]
    Domain {
        op: &'static str,
        value: f64,
        domain: &'static str,
    },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("backward requires a scalar loss, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("tensor is detached: loss has no recorded tape")]
    Detached,

    #[error("search cell has no recorded forward state")]
    MissingForwardState,

    #[error("modality mismatch: {0}")]
    Modality(String),

    #[error("unbalanced modalities: {rgb} rgb rows vs {ir} ir rows")]
    UnbalancedModality { rgb: usize, ir: usize },

    #[error("insufficient data: {0}")]
    Insufficient(String),

    #[error("query identity {0} has no match in the gallery")]
    MissingIdentity(u32),

    #[error("query {0} has no relevant gallery item")]
    NoRelevant(usize),

    #[error("non-finite value during {stage}: {detail}")]
    NonFinite { stage: String, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl NfsError {
    pub(crate) fn shape(
        op: &'static str,
        dim: impl Into<String>,
        expected: impl std::fmt::Debug,
        actual: impl std::fmt::Debug,
    ) -> Self {
        NfsError::ShapeMismatch {
            op,
            dim: dim.into(),
            expected: format!("{expected:?}"),
            actual: format!("{actual:?}"),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        NfsError::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        NfsError::Format {
            path: path.into(),
            reason: reason.into(),
        }
    }
}
