use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

/// Errors produced by the core library.
#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: shape mismatch: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("backward: output must be a scalar, got shape {0:?}")]
    NonScalarOutput(Vec<usize>),

    #[error("{0}: variable does not belong to this tape")]
    ForeignVar(&'static str),

    #[error("invalid network: {0}")]
    Network(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("pruning: {0}")]
    Prune(String),

    #[error("non-finite loss at iteration {iter} (epoch {epoch}): {detail}")]
    Divergence {
        iter: u64,
        epoch: usize,
        detail: String,
    },

    #[error("checkpoint: {0}")]
    Checkpoint(String),

    #[error(transparent)]
    Idx(#[from] IdxError),

    #[error("dataset: {0}")]
    Dataset(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Failures while decoding IDX (MNIST) files.
#[derive(Debug, Error)]
pub enum IdxError {
    #[error("{path}: bad magic number {found:#010x}, expected {expected:#010x}")]
    BadMagic {
        path: PathBuf,
        expected: u32,
        found: u32,
    },

    #[error("{path}: truncated file, need {expected} bytes but found {found}")]
    Truncated {
        path: PathBuf,
        expected: usize,
        found: usize,
    },

    #[error("image count {images} does not match label count {labels}")]
    CountMismatch { images: usize, labels: usize },
}

pub(crate) fn shape_err(op: &'static str, detail: impl Into<String>) -> Error {
    Error::Shape {
        op,
        detail: detail.into(),
    }
}
