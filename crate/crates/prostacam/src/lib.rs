//! File formats, pipeline stages and the command line of prostacam.
//!
//! The numerical work lives in [`prostacam_core`] (re-exported as
//! [`core`]); this crate reads and writes volumes, checkpoints, configs and
//! manifests, and runs the stages `synth`, `ingest`, `preprocess`, `train`,
//! `explain` and `report` over an output directory.

pub use prostacam_core as core;

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod manifest;
pub mod stages;
pub mod volume_io;

pub use error::{PipelineError, Result};
