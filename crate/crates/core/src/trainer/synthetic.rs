//! Procedural talking "portraits" in latent space.
//!
//! Each clip has a static head blob, two eye blobs that blink now and then,
//! and a mouth blob whose opening follows a synthetic speech envelope. The
//! audio features are that envelope projected onto a fixed random direction
//! plus noise, so lip motion and audio are correlated.

use crate::audio::{block_audio_features, AudioBlocks};
use crate::denoiser::ModelConfig;
use crate::error::Result;
use crate::fusion::RegionMaskSet;
use crate::numerics::{Rng, Tensor};

/// One generated clip at latent resolution.
#[derive(Clone, Debug)]
pub struct SyntheticClip {
    /// `C × H × W`, mouth closed, eyes open.
    pub ref_latent: Tensor,
    /// `frames × C × H × W`.
    pub latents: Tensor,
    pub masks: RegionMaskSet,
    /// `frames × c_audio`, aligned to the video frames.
    pub audio_features: Tensor,
    /// Mouth opening per frame, in `[0, 1]`.
    pub envelope: Vec<f64>,
}

/// Single-frame training example.
#[derive(Clone, Debug)]
pub struct ImageSample {
    pub ref_latent: Tensor,
    /// `C × H × W`.
    pub target: Tensor,
    pub masks: RegionMaskSet,
    /// `l × c_audio` block of the target frame.
    pub audio: Tensor,
}

/// Multi-frame training example; the leading frames serve as motion frames.
#[derive(Clone, Debug)]
pub struct ClipSample {
    pub ref_latent: Tensor,
    /// `K × C × H × W`.
    pub frames: Tensor,
    pub masks: RegionMaskSet,
    /// `1 × K × l × c_audio`.
    pub audio: AudioBlocks,
}

fn soft_ellipse(y: f64, x: f64, cy: f64, cx: f64, ry: f64, rx: f64) -> f64 {
    let d = (((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2)).sqrt();
    ((1.0 - d) * 3.0).clamp(0.0, 1.0)
}

/// Speech-like envelope: a few syllables per second with pauses.
pub fn synthetic_envelope(frames: usize, rng: &mut Rng) -> Vec<f64> {
    let period = rng.uniform_range(5.0, 9.0);
    let phase = rng.uniform_range(0.0, std::f64::consts::TAU);
    let pause_every = 8 + rng.below(8);
    (0..frames)
        .map(|f| {
            let s = 0.5 + 0.5 * (std::f64::consts::TAU * f as f64 / period + phase).sin();
            if (f / pause_every) % 3 == 2 {
                0.1 * s
            } else {
                s
            }
        })
        .collect()
}

/// Audio features `frames × channels` carrying `envelope`.
pub fn synthetic_audio_features(envelope: &[f64], channels: usize, rng: &mut Rng) -> Tensor {
    let dir: Vec<f64> = (0..channels).map(|_| rng.normal()).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
    let mut data = Vec::with_capacity(envelope.len() * channels);
    for &e in envelope {
        for d in &dir {
            data.push(2.0 * e * d / norm * (channels as f64).sqrt() / 2.0 + 0.05 * rng.normal());
        }
    }
    Tensor::new([envelope.len(), channels], data).expect("positive sizes")
}

pub fn synthetic_clip(cfg: &ModelConfig, frames: usize, seed: u64) -> Result<SyntheticClip> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let (h, w, c) = (cfg.height, cfg.width, cfg.channels);
    let (hf, wf) = (h as f64, w as f64);
    let cy = hf / 2.0 + rng.uniform_range(-0.05, 0.05) * hf - 0.5;
    let cx = wf / 2.0 + rng.uniform_range(-0.05, 0.05) * wf - 0.5;
    let head_r = (0.38 * hf, 0.3 * wf);
    let px = |frac: f64, size: f64| (frac * size).max(0.75);
    let mouth_c = (cy + 0.2 * hf, cx);
    let mouth_r = (px(0.1, hf), px(0.15, wf));
    let eye_c = [(cy - 0.1 * hf, cx - 0.13 * wf), (cy - 0.1 * hf, cx + 0.13 * wf)];
    let eye_r = (px(0.06, hf), px(0.07, wf));

    let skin: Vec<f64> = (0..c).map(|_| rng.uniform_range(0.4, 0.9)).collect();
    let lip: Vec<f64> = (0..c).map(|_| rng.uniform_range(-1.2, -0.6)).collect();
    let iris: Vec<f64> = (0..c).map(|_| rng.uniform_range(-1.0, -0.5)).collect();

    let mut head = vec![0.0; h * w];
    let mut mouth = vec![0.0; h * w];
    let mut eyes = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (yf, xf) = (y as f64, x as f64);
            let i = y * w + x;
            head[i] = soft_ellipse(yf, xf, cy, cx, head_r.0, head_r.1);
            mouth[i] = soft_ellipse(yf, xf, mouth_c.0, mouth_c.1, mouth_r.0 * 1.3, mouth_r.1).min(head[i]);
            let e = eye_c
                .iter()
                .map(|&(ey, ex)| soft_ellipse(yf, xf, ey, ex, eye_r.0 * 1.3, eye_r.1 * 1.3))
                .fold(0.0, f64::max);
            eyes[i] = e.min(head[i]);
        }
    }

    let envelope = synthetic_envelope(frames, &mut rng);
    let blink_every = 10 + rng.below(10);
    let render = |open: f64, blink: f64| -> Vec<f64> {
        let mut out = vec![0.0; c * h * w];
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    let (yf, xf) = (y as f64, x as f64);
                    let i = y * w + x;
                    let bg = 0.3 * (0.5 * xf + ch as f64).sin() + 0.2 * (0.4 * yf * (ch + 1) as f64).cos();
                    let ry = mouth_r.0 * (0.3 + open);
                    let m = soft_ellipse(yf, xf, mouth_c.0, mouth_c.1, ry, mouth_r.1) * open;
                    let e = eye_c
                        .iter()
                        .map(|&(ey, ex)| soft_ellipse(yf, xf, ey, ex, eye_r.0 * (1.0 - 0.8 * blink), eye_r.1))
                        .fold(0.0, f64::max);
                    out[(ch * h + y) * w + x] =
                        (1.0 - head[i]) * bg + head[i] * skin[ch] + m * lip[ch] + e * iris[ch];
                }
            }
        }
        out
    };
    let ref_latent = Tensor::new([c, h, w], render(0.0, 0.0))?;
    let mut data = Vec::with_capacity(frames * c * h * w);
    for (f, &open) in envelope.iter().enumerate() {
        let blink = if f % blink_every == blink_every - 1 { 1.0 } else { 0.0 };
        data.extend(render(open, blink));
    }
    let latents = Tensor::new([frames, c, h, w], data)?;
    let masks = RegionMaskSet::new(
        Tensor::new([h, w], head)?,
        Tensor::new([h, w], mouth)?,
        Tensor::new([h, w], eyes)?,
    )?;
    let audio_features = synthetic_audio_features(&envelope, cfg.audio_channels, &mut rng);
    Ok(SyntheticClip {
        ref_latent,
        latents,
        masks,
        audio_features,
        envelope,
    })
}

impl SyntheticClip {
    pub fn frames(&self) -> usize {
        self.latents.shape()[0]
    }

    pub fn audio_blocks(&self, l: usize) -> Result<AudioBlocks> {
        block_audio_features(&self.audio_features, l, None)
    }

    pub fn image_samples(&self, l: usize) -> Result<Vec<ImageSample>> {
        self.clip_sample(l)?.image_samples()
    }

    pub fn clip_sample(&self, l: usize) -> Result<ClipSample> {
        Ok(ClipSample {
            ref_latent: self.ref_latent.clone(),
            frames: self.latents.clone(),
            masks: self.masks.clone(),
            audio: self.audio_blocks(l)?,
        })
    }
}

impl ClipSample {
    /// One single-frame example per clip frame.
    pub fn image_samples(&self) -> Result<Vec<ImageSample>> {
        (0..self.frames.shape()[0])
            .map(|i| {
                Ok(ImageSample {
                    ref_latent: self.ref_latent.clone(),
                    target: self.frames.index_axis0(i)?,
                    masks: self.masks.clone(),
                    audio: self.audio.block(0, i)?,
                })
            })
            .collect()
    }
}
