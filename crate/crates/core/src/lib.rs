//! Paired cross-modal image translation at desk scale.
//!
//! End-to-end pipeline: raster preprocessing (downsample, affine
//! registration, tiling), conditional-GAN training of a U-Net generator
//! against a PatchGAN discriminator under three adversarial objectives,
//! tiled inference with coordinate stitching, and perceptual evaluation
//! (Fréchet feature distance and a fixed-extractor perceptual metric).
//!
//! Everything runs on a from-scratch reverse-mode tensor engine ([`tensor`])
//! whose backward pass is itself differentiable, which is what the
//! Wasserstein gradient-penalty objective needs.

pub mod error;
pub mod hpo;
pub mod metrics;
pub mod models;
pub mod objectives;
pub mod preprocess;
pub mod raster;
pub mod rng;
pub mod runtime;
pub mod synthetic;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
