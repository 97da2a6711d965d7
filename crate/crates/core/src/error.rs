use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("batch norm in training mode needs at least 2 rows, got {0}")]
    DegenerateBatch(usize),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error("missing blob {}", .0.display())]
    MissingBlob(PathBuf),
    #[error("blob {} has {actual} bytes, manifest implies {expected}", path.display())]
    SizeMismatch {
        path: PathBuf,
        expected: u64,
        actual: u64,
    },
    #[error("token id {id} out of range for vocabulary of {vocab_size} ({context})")]
    BadToken {
        id: u32,
        vocab_size: usize,
        context: String,
    },
    #[error("caption has no tokens")]
    EmptyCaption,
    #[error("fusion tree expects {expected} inputs, got {actual}")]
    ArityMismatch { expected: usize, actual: usize },
    #[error("zero vector at row {0}")]
    ZeroVector(usize),
    #[error("triplet loss needs a batch of at least 2, got {0}")]
    BatchTooSmall(usize),
    #[error("re-ranking weight must lie in [0, 1], got {0}")]
    BadLambda(f64),
    #[error("empty similarity matrix")]
    EmptyMatrix,
    #[error("non-finite loss at epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("io failure on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("json error in {}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
}

impl Error {
    /// Stable variant name, printed by the CLI on failure.
    pub fn name(&self) -> &'static str {
        match self {
            Error::ShapeMismatch(_) => "ShapeMismatch",
            Error::NonFinite(_) => "NonFinite",
            Error::DegenerateBatch(_) => "DegenerateBatch",
            Error::EmptyInput(_) => "EmptyInput",
            Error::MissingBlob(_) => "MissingBlob",
            Error::SizeMismatch { .. } => "SizeMismatch",
            Error::BadToken { .. } => "BadToken",
            Error::EmptyCaption => "EmptyCaption",
            Error::ArityMismatch { .. } => "ArityMismatch",
            Error::ZeroVector(_) => "ZeroVector",
            Error::BatchTooSmall(_) => "BatchTooSmall",
            Error::BadLambda(_) => "BadLambda",
            Error::EmptyMatrix => "EmptyMatrix",
            Error::NonFiniteLoss { .. } => "NonFiniteLoss",
            Error::Config(_) => "ConfigError",
            Error::Checkpoint(_) => "CheckpointError",
            Error::Io { .. } => "IoFailure",
            Error::Json { .. } => "JsonError",
        }
    }

    /// True for I/O and configuration failures (CLI exit code 2); domain errors map to 1.
    pub fn is_environmental(&self) -> bool {
        matches!(
            self,
            Error::Io { .. }
                | Error::Json { .. }
                | Error::Config(_)
                | Error::Checkpoint(_)
                | Error::MissingBlob(_)
        )
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
