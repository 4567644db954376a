//! Dynamic neural radiance fields for desk-scale scenes: a time-conditioned
//! volumetric MLP trained from synchronized multi-view video, with importance
//! sampling driven by temporal appearance change and a coarse-to-fine
//! keyframe curriculum.
//!
//! Layering, bottom up:
//! - [`imagebuf`], [`geometry`]: pixels, cameras, rays.
//! - [`render`]: stratified sampling, emission-absorption compositing,
//!   weight-guided resampling.
//! - [`synth`], [`dataset`]: analytic test scenes and the on-disk
//!   multi-view video layout.
//! - [`field`]: positional encoding, the conditioned MLP, and hand-written
//!   gradients for the full render-to-loss chain.
//! - [`sampling`]: global and temporal importance weight maps and the ray
//!   samplers built from them.
//! - [`train`]: Adam, the staged curriculum, checkpoints.
//! - [`metrics`]: PSNR, SSIM/DSSIM, sequence evaluation.

pub mod cli;
pub mod dataset;
pub mod error;
pub mod field;
pub mod geometry;
pub mod imagebuf;
pub mod metrics;
pub mod render;
pub mod sampling;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
pub use imagebuf::Image;
