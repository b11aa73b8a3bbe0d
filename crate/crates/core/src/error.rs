use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("dimension mismatch: expected {expected:?}, found {found:?}")]
    DimMismatch {
        expected: [usize; 3],
        found: [usize; 3],
    },

    #[error("empty region: {0}")]
    EmptyRegion(String),

    #[error("label sets differ: {0:?} vs {1:?}")]
    LabelSetMismatch(Vec<i16>, Vec<i16>),

    #[error("invalid header in {path}: {reason}")]
    InvalidHeader { path: PathBuf, reason: String },

    #[error("data length mismatch: header implies {expected} elements, file holds {found}")]
    DataLength { expected: usize, found: usize },

    #[error("unsupported dtype `{0}`")]
    UnsupportedDtype(String),

    #[error("optimization diverged at iteration {iteration}")]
    Diverged { iteration: usize },

    #[error("config mismatch: {0}")]
    ConfigMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub(crate) fn check_dims(expected: [usize; 3], found: [usize; 3]) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::DimMismatch { expected, found })
    }
}
