use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config: {0}")]
    Config(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error(transparent)]
    Core(#[from] mas_core::Error),

    #[error("missing input {0}; run the earlier pipeline stage first")]
    MissingInput(PathBuf),

    /// Some jobs failed; the outputs of the others were written.
    #[error("{} job(s) failed: {}", .0.len(), .0.join("; "))]
    JobsFailed(Vec<String>),
}
