use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("non-finite loss {loss} at task {task}, step {step}")]
    NonFiniteLoss {
        task: usize,
        step: usize,
        loss: f64,
        trace: Box<crate::harness::RunTrace>,
    },
    #[error("idx: bad magic number 0x{found:08x} (expected 0x{expected:08x})")]
    IdxMagic { expected: u32, found: u32 },
    #[error("idx: truncated file, expected {expected} bytes but found {found}")]
    IdxTruncated { expected: usize, found: usize },
    #[error("idx: {images} images but {labels} labels")]
    IdxCountMismatch { images: usize, labels: usize },
    #[error("csv: non-numeric cell {value:?} at row {row}, column {col}")]
    CsvCell { row: usize, col: usize, value: String },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}
