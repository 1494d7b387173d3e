//! NoiseCutMix: data augmentation by mixing class-conditioned noise estimates
//! inside the reverse diffusion process.
//!
//! The crate is built around a closed-form optimal noise predictor for
//! Gaussian class models, so every step of the mechanism can be checked
//! exactly:
//!
//! - [`schedule`]: variance-preserving cosine schedule, forward noising,
//!   classifier-free guidance.
//! - [`denoiser`]: per-class Gaussian image models, the analytic noise
//!   predictor and the synthetic bump datasets.
//! - [`mask`]: Beta-sampled mixing ratio, rectangular masks and soft labels.
//! - [`sampler`]: ancestral and DPM-Solver++(2M) reverse processes, single
//!   class generation and the NoiseCutMix loop.
//! - [`augment`]: pixel-space CutMix and MixUp.
//! - [`classifier`]: small MLP trained with soft-label cross-entropy and Adam.
//! - [`harness`]: the method registry and multi-trial experiment runner.
//! - [`io`]: binary sample files, provenance sidecars and PGM montages.

pub mod augment;
pub mod classifier;
pub mod denoiser;
pub mod error;
pub mod grid;
pub mod harness;
pub mod io;
pub mod mask;
pub mod sampler;
pub mod schedule;
pub mod seeds;

pub use error::{Error, Result};
pub use grid::ImageGrid;
