use std::path::Path;

use serde::{Deserialize, Serialize};

use super::model::{Denoiser, StepConditioning};
use super::schedule::{add_noise, denoise_step, DiffusionSchedule};
use crate::audio::AudioBlocks;
use crate::error::{config_err, shape_err, Error, Result};
use crate::fusion::{Region, RegionMaskSet, RegionScales};
use crate::numerics::{lltf, DType, Rng, Tensor};

/// Generated latents, `F × C × H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentVideo {
    values: Tensor,
}

impl LatentVideo {
    pub fn new(values: Tensor) -> Result<Self> {
        if values.rank() != 4 {
            return Err(shape_err!("latent video must be F × C × H × W, got {:?}", values.shape()));
        }
        if !values.all_finite() {
            return Err(Error::Numeric("latent video has non-finite values".into()));
        }
        Ok(Self { values })
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.values
    }

    pub fn into_tensor(self) -> Tensor {
        self.values
    }

    pub fn frame(&self, i: usize) -> Result<Tensor> {
        self.values.index_axis0(i)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(lltf::read_rank(path, 4)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        lltf::write(path, &self.values)
    }
}

/// Background pass settings of a generation request.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackgroundConfig {
    pub enabled: bool,
    pub strength: f64,
}

impl Default for BackgroundConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            strength: 0.3,
        }
    }
}

/// JSON generation request.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    pub seed: u64,
    pub total_frames: usize,
    #[serde(default)]
    pub scales: RegionScales,
    #[serde(default)]
    pub background: BackgroundConfig,
}

/// Where a motion frame of a chunk came from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MotionSource {
    Reference,
    /// Index into the generated video.
    Generated(usize),
}

#[derive(Clone, Debug, Serialize)]
pub struct ChunkTrace {
    pub index: usize,
    /// First output frame of the chunk.
    pub start: usize,
    pub frames: usize,
    pub motion_sources: Vec<MotionSource>,
    /// The exact `M × C × H × W` latents the chunk was conditioned on.
    #[serde(skip)]
    pub motion_latents: Option<Tensor>,
}

/// Instrumentation of a [`sample_video`] run.
#[derive(Clone, Debug, Default, Serialize)]
pub struct SampleTrace {
    pub chunks: Vec<ChunkTrace>,
}

/// Inputs of [`sample_video`].
#[derive(Clone, Copy, Debug)]
pub struct SampleRequest<'a> {
    /// `C × H × W`.
    pub ref_latent: &'a Tensor,
    /// At latent resolution.
    pub masks: &'a RegionMaskSet,
    /// Raw audio blocks; item 0 is used and must cover `total_frames`.
    pub audio: &'a AudioBlocks,
    pub scales: RegionScales,
    pub total_frames: usize,
    pub seed: u64,
}

/// Chunked long-video generation with full deterministic reverse diffusion
/// per chunk. Chunk `k` covers frames `k·F ..` (the last may be shorter)
/// and is conditioned on the `M` frames before it, or on `M` copies of the
/// reference latent for the first chunk. Output is 32-bit.
pub fn sample_video(model: &Denoiser, req: &SampleRequest) -> Result<(LatentVideo, SampleTrace)> {
    let cfg = &model.config;
    let schedule = DiffusionSchedule::scaled_linear(cfg.timesteps)?;
    if req.total_frames == 0 {
        return Err(config_err!("total_frames must be at least 1"));
    }
    if req.audio.channels() != cfg.audio_channels || req.audio.context() != cfg.audio_context {
        return Err(shape_err!(
            "audio blocks are {:?}, model expects l = {} and c = {}",
            req.audio.values.shape(),
            cfg.audio_context,
            cfg.audio_channels
        ));
    }
    if req.audio.frames() < req.total_frames {
        return Err(Error::Input(format!(
            "audio covers {} frames, {} requested",
            req.audio.frames(),
            req.total_frames
        )));
    }
    let reference = model.extract_reference_features(req.ref_latent)?;
    let rng = Rng::new(req.seed);
    let (f, m) = (cfg.video_length, cfg.motion_frames);
    let frame_len = req.ref_latent.len();
    let mut out: Vec<f64> = Vec::with_capacity(req.total_frames * frame_len);
    let mut trace = SampleTrace::default();
    let mut start = 0;
    while start < req.total_frames {
        let index = trace.chunks.len();
        let len = f.min(req.total_frames - start);
        let sources: Vec<MotionSource> = (0..m)
            .map(|j| match (start + j).checked_sub(m) {
                Some(i) => MotionSource::Generated(i),
                None => MotionSource::Reference,
            })
            .collect();
        let motion_latents = if m == 0 {
            None
        } else {
            let mut data = Vec::with_capacity(m * frame_len);
            for s in &sources {
                match *s {
                    MotionSource::Reference => data.extend_from_slice(req.ref_latent.data()),
                    MotionSource::Generated(i) => data.extend_from_slice(&out[i * frame_len..(i + 1) * frame_len]),
                }
            }
            let [c, h, w] = cfg.frame_shape();
            Some(Tensor::with_dtype(DType::F32, [m, c, h, w], data)?)
        };
        let motion = motion_latents.as_ref().map(|t| model.frame_features(t)).transpose()?;
        let audio = req.audio.frame_range(0, start, start + len)?;
        let cond = StepConditioning {
            reference: &reference,
            motion: motion.as_ref(),
            temporal: true,
            audio: &audio,
            masks: req.masks,
            scales: req.scales,
        };
        let [c, h, w] = cfg.frame_shape();
        let mut x = rng.split(index as u64).normal_tensor([len, c, h, w]);
        for t in (0..schedule.timesteps()).rev() {
            let eps = model.predict_noise(&x, t, &cond)?;
            x = denoise_step(&x, t, &eps, &schedule, 0.0)?;
        }
        if !x.all_finite() {
            return Err(Error::Numeric(format!("chunk {index} diverged")));
        }
        out.extend(x.to_dtype(DType::F32).data());
        trace.chunks.push(ChunkTrace {
            index,
            start,
            frames: len,
            motion_sources: sources,
            motion_latents,
        });
        start += len;
    }
    let [c, h, w] = cfg.frame_shape();
    let video = LatentVideo::new(Tensor::with_dtype(DType::F32, [req.total_frames, c, h, w], out)?)?;
    Ok((video, trace))
}

/// Default background mask, `1 − mask_head`.
pub fn default_background_mask(masks: &RegionMaskSet) -> Tensor {
    masks.get(Region::Head).map(|v| 1.0 - v)
}

/// Image-to-image pass over the background. `ref_latent` (`C × H × W`) is
/// noised to `t = round(strength · (T − 1))` and denoised with `eps`; each
/// frame is then blended toward the result by `background_mask` (`H × W`).
/// Positions with mask 0 keep their values bitwise, mask 1 takes the
/// background exactly.
pub fn stabilize_background<F>(
    video: &LatentVideo,
    ref_latent: &Tensor,
    background_mask: &Tensor,
    strength: f64,
    schedule: &DiffusionSchedule,
    seed: u64,
    mut eps: F,
) -> Result<LatentVideo>
where
    F: FnMut(&Tensor, usize) -> Result<Tensor>,
{
    if !(0.0..=1.0).contains(&strength) {
        return Err(config_err!("background strength {strength} outside [0, 1]"));
    }
    let v = video.tensor();
    if ref_latent.rank() != 3 || ref_latent.shape() != &v.shape()[1..] {
        return Err(shape_err!(
            "reference latent {:?} does not match video frames {:?}",
            ref_latent.shape(),
            &v.shape()[1..]
        ));
    }
    let (c, h, w) = (v.shape()[1], v.shape()[2], v.shape()[3]);
    if background_mask.shape() != [h, w] {
        return Err(shape_err!("background mask {:?} is not {h}×{w}", background_mask.shape()));
    }
    if background_mask.data().iter().any(|m| !(0.0..=1.0).contains(m)) {
        return Err(Error::Input("background mask values must lie in [0, 1]".into()));
    }
    if background_mask.data().iter().all(|&m| m == 0.0) {
        return Ok(video.clone());
    }
    let background = if strength == 0.0 {
        ref_latent.clone()
    } else {
        let t0 = (strength * (schedule.timesteps() - 1) as f64).round() as usize;
        let x0 = ref_latent.reshape([1, c, h, w])?;
        let noise = Rng::new(seed).normal_tensor([1, c, h, w]);
        let mut x = add_noise(&x0, t0, schedule, &noise)?;
        for t in (0..=t0).rev() {
            let e = eps(&x, t)?;
            x = denoise_step(&x, t, &e, schedule, 0.0)?;
        }
        x.reshape([c, h, w])?
    };
    let n = h * w;
    let mask = background_mask.data();
    let bg = background.data();
    let mut out = v.clone();
    let dt = v.dtype();
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        let within = i % (c * n);
        let m = mask[within % n];
        if m == 0.0 {
            continue;
        }
        *o = if m == 1.0 {
            dt.round(bg[within])
        } else {
            dt.round(m * bg[within] + (1.0 - m) * *o)
        };
    }
    LatentVideo::new(out)
}

/// Background pass driven by `model` itself with every region scale at zero,
/// so the result does not depend on audio.
pub fn stabilize_with_model(
    model: &Denoiser,
    video: &LatentVideo,
    ref_latent: &Tensor,
    masks: &RegionMaskSet,
    background_mask: &Tensor,
    strength: f64,
    seed: u64,
) -> Result<LatentVideo> {
    let cfg = &model.config;
    let schedule = DiffusionSchedule::scaled_linear(cfg.timesteps)?;
    let reference = model.extract_reference_features(ref_latent)?;
    let [c, h, w] = cfg.frame_shape();
    let motion = if cfg.motion_frames == 0 {
        None
    } else {
        let copies = vec![ref_latent.reshape([1, c, h, w])?; cfg.motion_frames];
        Some(model.frame_features(&Tensor::concat0(&copies)?)?)
    };
    let silence = Tensor::zeros([1, cfg.audio_context, cfg.audio_channels]);
    let cond = StepConditioning {
        reference: &reference,
        motion: motion.as_ref(),
        temporal: true,
        audio: &silence,
        masks,
        scales: RegionScales::uniform(0.0),
    };
    let bg_seed = Rng::new(seed).split(u64::MAX).seed();
    stabilize_background(video, ref_latent, background_mask, strength, &schedule, bg_seed, |x, t| {
        model.predict_noise(x, t, &cond)
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::ModelConfig;

    fn video(seed: u64) -> LatentVideo {
        LatentVideo::new(Rng::new(seed).normal_tensor([3, 2, 4, 4]).to_dtype(DType::F32)).unwrap()
    }

    fn oracle_eps(x: &Tensor, _t: usize) -> Result<Tensor> {
        Ok(x.map(|v| 0.1 * v))
    }

    #[test]
    fn strength_zero_copies_reference_into_background() {
        let v = video(1);
        let r = Rng::new(2).normal_tensor([2, 4, 4]);
        let mask = Tensor::from_fn([4, 4], |i| if i % 4 < 2 { 1.0 } else { 0.0 });
        let s = DiffusionSchedule::scaled_linear(10).unwrap();
        let out = stabilize_background(&v, &r, &mask, 0.0, &s, 3, oracle_eps).unwrap();
        for f in 0..3 {
            for c in 0..2 {
                for y in 0..4 {
                    for x in 0..4 {
                        let got = out.tensor().at(&[f, c, y, x]);
                        let want = if x < 2 { DType::F32.round(r.at(&[c, y, x])) } else { v.tensor().at(&[f, c, y, x]) };
                        assert_eq!(got.to_bits(), want.to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn empty_mask_and_zero_tokens_are_untouched() {
        let v = video(4);
        let r = Rng::new(5).normal_tensor([2, 4, 4]);
        let s = DiffusionSchedule::scaled_linear(10).unwrap();
        let zero = Tensor::zeros([4, 4]);
        assert!(stabilize_background(&v, &r, &zero, 0.7, &s, 1, oracle_eps).unwrap().tensor().bit_eq(v.tensor()));
        let soft = Rng::new(6).uniform_tensor([4, 4], 0.0, 1.0).map(|m| if m < 0.4 { 0.0 } else { m });
        for strength in [0.0, 0.3, 1.0] {
            let out = stabilize_background(&v, &r, &soft, strength, &s, 1, oracle_eps).unwrap();
            for (i, (a, b)) in out.tensor().data().iter().zip(v.tensor().data()).enumerate() {
                if soft.data()[i % 16] == 0.0 {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        assert!(matches!(stabilize_background(&v, &r, &soft, 1.5, &s, 1, oracle_eps), Err(Error::Config(_))));
    }

    #[test]
    fn chunking_plumbs_motion_frames() {
        let cfg = ModelConfig {
            timesteps: 3,
            video_length: 3,
            ..ModelConfig::tiny()
        };
        let model = Denoiser::init(cfg.clone(), 1).unwrap();
        let mut rng = Rng::new(2);
        let r = rng.normal_tensor(cfg.frame_shape());
        let masks = RegionMaskSet::new(
            Tensor::full([4, 4], 1.0),
            rng.uniform_tensor([4, 4], 0.0, 1.0),
            rng.uniform_tensor([4, 4], 0.0, 1.0),
        )
        .unwrap();
        let audio = AudioBlocks::new(rng.normal_tensor([1, 8, cfg.audio_context, cfg.audio_channels])).unwrap();
        let req = SampleRequest {
            ref_latent: &r,
            masks: &masks,
            audio: &audio,
            scales: RegionScales::default(),
            total_frames: 8,
            seed: 9,
        };
        let (v, trace) = sample_video(&model, &req).unwrap();
        assert_eq!(v.frames(), 8);
        assert_eq!(trace.chunks.iter().map(|c| c.frames).collect::<Vec<_>>(), vec![3, 3, 2]);
        assert_eq!(trace.chunks[0].motion_sources, vec![MotionSource::Reference]);
        assert_eq!(trace.chunks[1].motion_sources, vec![MotionSource::Generated(2)]);
        assert_eq!(trace.chunks[2].motion_sources, vec![MotionSource::Generated(5)]);
        let m2 = trace.chunks[2].motion_latents.as_ref().unwrap();
        assert!(m2.index_axis0(0).unwrap().bit_eq(&v.frame(5).unwrap()));
        let (again, _) = sample_video(&model, &req).unwrap();
        assert!(again.tensor().bit_eq(v.tensor()));
        let short = SampleRequest { total_frames: 9, ..req };
        assert!(matches!(sample_video(&model, &short), Err(Error::Input(_))));
    }
}
