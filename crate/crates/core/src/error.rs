use std::path::PathBuf;

use thiserror::Error;

use crate::tensor::TensorError;

#[derive(Debug, Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("invalid training config: {0}")]
    InvalidTrainConfig(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: malformed file: {detail}")]
    Format { path: PathBuf, detail: String },
    #[error("{path}: checksum mismatch (manifest {expected:08x}, blob {actual:08x})")]
    ChecksumMismatch { path: PathBuf, expected: u32, actual: u32 },
    #[error("{path}: unsupported PNG: {detail}")]
    UnsupportedImage { path: PathBuf, detail: String },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("training diverged at epoch {epoch}, step {step}: loss = {loss}")]
    Diverged { epoch: usize, step: usize, loss: f64 },
    #[error("optimizer: {0}")]
    Optimizer(String),
    #[error("quantization: {0}")]
    Quantization(String),
    #[error("metric: {0}")]
    Metric(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, detail: impl Into<String>) -> Self {
        Error::Format { path: path.into(), detail: detail.into() }
    }
}
