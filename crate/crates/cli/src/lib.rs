//! Command-line pipeline around `mas_core`: cohort generation, pairwise
//! registration, similarity training, label fusion, atlas-count sweeps and
//! evaluation, all driven by one JSON config.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;

pub use config::{FusionMethod, Overrides, PipelineConfig, SubjectPaths};
pub use error::{CliError, Result};
