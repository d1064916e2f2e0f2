//! Unconditioned 3D Gaussian splatting GAN.
//!
//! The generator maps a latent code to one explicit Gaussian scene, which is
//! rendered by a differentiable rasterizer and judged by a camera-conditioned
//! discriminator. No camera information ever reaches the generator.

pub mod camera;
pub mod checkpoint;
pub mod data;
pub mod discriminator;
pub mod error;
pub mod generator;
pub mod gradcheck;
pub mod imaging;
pub mod metrics;
pub mod ply;
pub mod raster;
pub mod scene;
pub mod training;

pub use error::{Error, Result};
