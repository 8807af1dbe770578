//! Desk-scale 3D Gaussian splat editing.
//!
//! The crate is organized around the pipeline stages: `splat` renders RGB
//! and depth from a Gaussian mixture scene, `cimln` refines the rendered
//! depth with a two-branch mutual-learning network, `diffusion` runs DDIM
//! inversion/denoising with `wavelet` consensus attention aligning views,
//! and `pipeline` orchestrates the whole edit plus metrics. `tensor` is the
//! differentiable array substrate underneath all of it.

pub mod cimln;
pub mod diffusion;
pub mod error;
pub mod pipeline;
pub mod rten;
pub mod splat;
pub mod tensor;
pub mod wavelet;

pub use error::{Error, Result};
pub use tensor::Tensor;
