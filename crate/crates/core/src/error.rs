//! Error type shared across the crate.

use std::path::PathBuf;

use thiserror::Error;

/// Errors produced by any rfseg operation.
#[derive(Debug, Error)]
pub enum Error {
    #[error("file not found: {0}")]
    FileNotFound(PathBuf),
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("corrupt image {path}: {reason}")]
    CorruptImage { path: PathBuf, reason: String },
    #[error("pad target {target_w}x{target_h} smaller than source {src_w}x{src_h}")]
    TargetSmallerThanSource {
        src_w: usize,
        src_h: usize,
        target_w: usize,
        target_h: usize,
    },
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dataset contains no samples")]
    EmptyDataset,
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("test set is empty")]
    EmptyTestSet,
    #[error("insufficient samples: {0}")]
    InsufficientSamples(String),
    #[error("bad magic bytes in model data")]
    BadMagic,
    #[error("unsupported model version {0}")]
    UnsupportedVersion(u32),
    #[error("model data truncated")]
    TruncatedData,
    #[error("malformed model data: {0}")]
    MalformedModel(String),
    #[error("model architecture mismatch: expected {expected}, found {found}")]
    ArchitectureMismatch { expected: String, found: String },
    #[error("no common image ids between the two reports")]
    NoCommonImages,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, Error>;
