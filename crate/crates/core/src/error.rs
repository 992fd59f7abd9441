use std::path::PathBuf;

use thiserror::Error;

use crate::model::CheckpointError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {left:?} vs {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("invalid argument: {0}")]
    Invalid(String),
    #[error("softmax row {row} is fully masked")]
    FullyMasked { row: usize },
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("sequence length {n} exceeds n_max = {n_max}")]
    SequenceTooLong { n: usize, n_max: usize },
    #[error("token id {id} out of range for vocabulary of size {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("sequence does not start with [CLS]")]
    MissingCls,
    #[error("every position of the sequence is padding")]
    FullyPadded,
    #[error("variant {variant} is not supported by {operation}")]
    UnsupportedVariant {
        variant: String,
        operation: &'static str,
    },
    #[error("training diverged at step {step}: loss = {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("toeplitz factorization reconstruction error {error:e} exceeds {tolerance:e}")]
    Reconstruction { error: f64, tolerance: f64 },
    #[error("{path}: {source}")]
    File {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }

    pub(crate) fn file(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::File {
            path: path.into(),
            source,
        }
    }
}
