//! Crate-wide error type.

use std::path::PathBuf;
use thiserror::Error;

/// Errors produced by dataset loading, model construction, training and the
/// file formats. Variants carry enough context to name the offending entry.
#[derive(Debug, Error)]
pub enum HsumError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("failed to parse {path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("manifest schema violation: {0}")]
    ManifestSchema(String),

    #[error("duplicate video id in manifest: {0}")]
    DuplicateVideoId(String),

    #[error("referenced file does not exist: {0}")]
    MissingFile(PathBuf),

    #[error("unknown video id: {0}")]
    UnknownVideoId(String),

    #[error("dimension mismatch for {what}: expected {expected}, got {got}")]
    DimensionMismatch {
        what: String,
        expected: usize,
        got: usize,
    },

    #[error("invariant violation: {0}")]
    Invariant(String),

    #[error("value out of range: {0}")]
    Range(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("metric undefined for this input: {0}")]
    Degenerate(String),

    #[error("bad file format in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("non-finite loss at step {step}: {detail}")]
    NonFiniteLoss { step: u64, detail: String },
}

impl HsumError {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        HsumError::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, HsumError>;
