//! Score-distillation radiance-field inpainting.
//!
//! A small neural radiance field is trained on posed RGB(-D) images with
//! removal masks: observed regions are reconstructed from pixels, masked
//! regions are hallucinated by distilling gradients from a pluggable
//! diffusion prior over rendered color images and plane-fit normal maps.

pub mod cli;
pub mod error;
pub mod field;
pub mod geometry;
pub mod img;
pub mod math;
pub mod metrics;
pub mod optim;
pub mod prior;
pub mod render;
pub mod scene;
pub mod sds;

pub use error::{Error, Result};
