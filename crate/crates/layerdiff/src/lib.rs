//! Toy-scale layered diffusion for multi-instance erasing.
//!
//! The library decomposes denoising into N foreground branches and one
//! background branch over a shared mini-UNet. Branches differ only in their
//! low-rank attention adapters, their mask-modulated attention bias, and
//! their conditioning tokens. Generated layers recompose into an image by
//! painter's-order masking, which is how selective removal is expressed.
//!
//! Everything runs on a self-contained f64 tensor engine with reverse-mode
//! differentiation, so training is deterministic under a seed and every
//! gradient can be checked against finite differences.

pub mod attention;
pub mod composer;
pub mod config;
pub mod denoiser;
pub mod diffusion;
pub mod guidance;
pub mod lora;
pub mod metrics;
pub mod params;
pub mod scenes;
pub mod selfcheck;
pub mod tensor;
pub mod training;

pub use tensor::{DRng, Tensor};
