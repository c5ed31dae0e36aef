//! Allocation-only core of the prostacam pipeline.
//!
//! Everything in this crate is a pure function of in-memory data: volume
//! geometry and preprocessing, the 3D residual classifier and its training
//! loop, Grad-CAM++ attention maps, leave-one-out bookkeeping and metrics,
//! the jet colormap, and the synthetic phantom generator. File formats, the
//! command line, and orchestration live in the `prostacam` crate.
//!
//! The crate builds without `std` (it needs `alloc`). The default `std`
//! feature only turns on runtime SIMD detection in the matrix kernels.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod error;
pub mod gradcam;
pub mod interp;
pub mod metrics;
pub mod nn;
pub mod preprocess;
pub mod render;
pub mod synth;
pub mod train;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{Geometry, Grid3, MaskRole, MaskVolume, ModalityKind, ModalityVolume};
