//! Crate-wide error type.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: expected {expected}, got {got} ({context})")]
    ShapeMismatch {
        expected: usize,
        got: usize,
        context: &'static str,
    },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("need at least {needed} samples, got {got}")]
    TooFewSamples { needed: usize, got: usize },

    #[error("categorical value {value} out of range for column {column} (cardinality {cardinality})")]
    ValueOutOfRange {
        column: usize,
        value: usize,
        cardinality: usize,
    },

    #[error("point not in the enumerated domain")]
    OutOfDomain,

    #[error("domains do not match: {0}")]
    DomainMismatch(String),

    #[error("training diverged at epoch {epoch}: {reason}")]
    Diverged { epoch: usize, reason: String },

    #[error("missing input: {0}")]
    MissingInput(String),

    #[error("schema drift in {path}: {detail}")]
    SchemaDrift { path: String, detail: String },

    #[error("unsupported model format version {found} (supported: {supported})")]
    FormatVersion { found: u32, supported: u32 },

    #[error("model kind {found:?} cannot be loaded as {expected}")]
    ModelKind { found: String, expected: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
