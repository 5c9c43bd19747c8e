use std::path::PathBuf;

use thiserror::Error;

use crate::data::DataError;
use crate::tensor::TensorError;
use crate::text::TextError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("input error: {0}")]
    Input(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("vocabulary hash mismatch: checkpoint expects {expected}, found {found}")]
    VocabMismatch { expected: String, found: String },
    #[error("non-finite loss at epoch {epoch} for triplet {triplet}")]
    NonFiniteLoss { epoch: usize, triplet: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code: 1 for rejected input, 2 for internal failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Tensor(_) | Error::NonFiniteLoss { .. } => 2,
            Error::Text(TextError::Tensor(_)) => 2,
            _ => 1,
        }
    }
}
