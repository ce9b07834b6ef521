use std::path::PathBuf;

use ndtensor::TensorError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },

    #[error("non-finite loss at epoch {epoch}, scene {scene_id}")]
    NonFiniteLoss { epoch: usize, scene_id: u64 },

    #[error("vocabulary mismatch: {0}")]
    VocabMismatch(String),

    #[error("{0}")]
    Eval(String),

    #[error("strong supervision needs at least as many predictions as targets ({targets} > {predictions})")]
    TooManyTargets { targets: usize, predictions: usize },

    #[error("unsorted detections at rank {0}")]
    Unsorted(usize),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Self::Io {
            path: path.into(),
            source,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
