//! Toy latent denoiser: diffusion schedule, reference twin, trunk with
//! fusion and temporal blocks, chunked sampling and background
//! stabilization.

mod model;
mod sampling;
mod schedule;

pub use model::{
    init_model_params, latent_to_tokens, temporal_attention, tokens_to_latent, Denoiser, ModelConfig,
    ReferenceFeatures, StepConditioning,
};
pub(crate) use model::{audio_var, eps_var, level_masks, refnet_var, Conditioning};
pub use sampling::{
    default_background_mask, sample_video, stabilize_background, stabilize_with_model, BackgroundConfig,
    ChunkTrace, GenerationConfig, LatentVideo, MotionSource, SampleRequest, SampleTrace,
};
pub use schedule::{add_noise, denoise_step, forward_noise, predict_x0, DiffusionSchedule};
