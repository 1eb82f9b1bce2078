use std::path::PathBuf;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    ShapeMismatch { op: &'static str, detail: String },

    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("parameter sets are not congruent: {0}")]
    Incongruent(String),

    #[error("variable does not belong to this tape")]
    ForeignVariable,

    #[error("loss must be a scalar, got shape {0:?}")]
    NonScalarLoss(Vec<usize>),

    #[error("no parameter matches patterns {0:?}")]
    EmptyMatch(Vec<String>),

    #[error("empty {0}")]
    Empty(&'static str),

    #[error("class {class} has {count} sample(s); stratified split needs at least 2")]
    ClassTooSmall { class: usize, count: usize },

    #[error("partition retry budget exhausted after {attempts} attempts")]
    RetryBudgetExhausted { attempts: usize },

    #[error("{file}: bad IDX magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic { file: PathBuf, expected: u32, found: u32 },

    #[error("{file}: truncated IDX file")]
    Truncated { file: PathBuf },

    #[error("IDX count mismatch: {images} images but {labels} labels")]
    CountMismatch { images: usize, labels: usize },

    #[error("integer overflow in {0}")]
    Overflow(&'static str),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::ShapeMismatch {
        op,
        detail: detail.into(),
    }
}
