use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error: {0}")]
    Shape(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("probabilities not normalized: pixel {index} sums to {sum}")]
    NotNormalized { index: usize, sum: f64 },

    #[error("label {label} at pixel {index} is outside {{0, 1}}")]
    InvalidLabel { index: usize, label: u8 },

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("metric undefined: {0}")]
    UndefinedMetric(String),

    #[error("surface undefined: {0} mask is empty")]
    UndefinedSurface(&'static str),

    #[error("alignment undefined: {0} mask is empty")]
    AlignmentUndefined(&'static str),

    #[error("phantom generation failed after {attempts} attempts: {reason}")]
    Generation { attempts: usize, reason: String },

    #[error("format error in {path}: {reason}")]
    Format { path: PathBuf, reason: String },

    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub(crate) fn format(path: impl Into<PathBuf>, reason: impl Into<String>) -> Self {
        Error::Format { path: path.into(), reason: reason.into() }
    }
}
