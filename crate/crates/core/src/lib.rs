//! Region-gated, audio-conditioned diffusion fusion for talking-portrait
//! animation, at desk scale.
//!
//! The crate is organized bottom-up:
//!
//! - [`numerics`]: tensors, the LLTF file format, attention and normalization
//!   kernels, a gradient tape and a finite-difference checker.
//! - [`audio`]: speech-encoder feature post-processing into per-frame audio
//!   context blocks.
//! - [`fusion`]: the dual cross-attention block with per-region gates.
//! - [`denoiser`]: a toy latent denoiser, diffusion schedule, chunked video
//!   sampling and background stabilization.
//! - [`trainer`]: region-weighted loss, Adam, and the two training stages.
//! - [`curation`]: the four-stage clip filtration pipeline and its report.
//! - [`metrics`]: SSIM, Fréchet distance and sync confidence.
//! - [`fixtures`]: deterministic synthetic datasets.

pub mod audio;
pub mod curation;
pub mod denoiser;
pub mod error;
pub mod fixtures;
pub mod fusion;
pub mod json;
pub mod metrics;
pub mod nn;
pub mod numerics;
pub mod trainer;

pub use error::{Error, Result};
pub use numerics::{DType, Tensor};

#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/tensors.md")]
    mod tensors {}
    #[doc = include_str!("../../../book/src/audio.md")]
    mod audio {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/sampling.md")]
    mod sampling {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/curation.md")]
    mod curation {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
