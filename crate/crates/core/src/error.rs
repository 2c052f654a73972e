use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error("Doppler {f0_hz} Hz is not below Nyquist ({nyquist_hz} Hz)")]
    Nyquist { f0_hz: f64, nyquist_hz: f64 },
    #[error("{path}: bad magic (expected {expected:?})")]
    BadMagic { path: PathBuf, expected: &'static str },
    #[error("{path}: unsupported version {version}")]
    Version { path: PathBuf, version: u32 },
    #[error("{path}: truncated ({len} bytes, expected {expected})")]
    Truncated { path: PathBuf, len: usize, expected: usize },
    #[error("{path}: dimensions overflow the addressable payload")]
    DimensionOverflow { path: PathBuf },
    #[error("{path}:{line}: {msg}")]
    Csv { path: PathBuf, line: usize, msg: String },
    #[error("gesture class {gesture} has {count} entries; at least 2 are needed to split")]
    ClassTooSmall { gesture: u16, count: usize },
    #[error("{0} is empty")]
    Empty(&'static str),
    #[error("condition {field}={id} is outside the vocabulary (size {size})")]
    InvalidCondition { field: &'static str, id: u16, size: u16 },
    #[error("model has not been trained")]
    UntrainedModel,
    #[error("non-finite loss at step {step} (mean |x_t| = {mean_abs_input:.3e})")]
    NonFiniteLoss { step: u64, mean_abs_input: f64 },
    #[error("generator cannot produce gesture {gesture}: {reason}")]
    Generator { gesture: u16, reason: String },
    #[error(transparent)]
    Autodiff(#[from] gda_autodiff::AutodiffError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::Invalid(msg.into())
    }
}
