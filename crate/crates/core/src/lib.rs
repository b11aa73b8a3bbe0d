//! Cross-modality multi-atlas segmentation: bidirectional dense registration
//! under a multi-scale Dice + consistency loss, similarity-weighted label
//! fusion, evaluation metrics and synthetic phantoms.

pub mod ddf;
pub mod error;
pub mod filter;
pub mod fusion;
mod interp;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod phantom;
pub mod registration;
pub mod similarity;
pub mod volume;

pub use error::{Error, Result};

/// Crate version, recorded in run manifests.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
