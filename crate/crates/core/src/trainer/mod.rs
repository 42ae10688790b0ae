//! Region-weighted noise-prediction loss, Adam, and the two training
//! stages.

mod data;
mod synthetic;

use std::collections::BTreeMap;
use std::path::PathBuf;
use std::time::Instant;

use serde::{Deserialize, Serialize};

pub use data::{clip_dirs, load_clip, load_dataset, save_clip, AUDIO_FILE, LATENTS_FILE, MASKS_DIR, REF_FILE};
pub use synthetic::{
    synthetic_audio_features, synthetic_clip, synthetic_envelope, ClipSample, ImageSample, SyntheticClip,
};

use crate::denoiser::{
    add_noise, audio_var, eps_var, latent_to_tokens, level_masks, refnet_var, Conditioning, Denoiser,
    DiffusionSchedule, ModelConfig,
};
use crate::error::{config_err, shape_err, Error, Result};
use crate::fusion::{Region, RegionMaskSet, RegionScales};
use crate::nn::Graph;
use crate::numerics::gradcheck::{grad_check, GradReport};
use crate::numerics::{ParamStore, Rng, Tensor, Var};

/// Denominator guard of the masked terms.
pub const MASK_EPS: f64 = 1e-8;

/// `MSE + λ_mouth·MaskedMSE(mouth) + λ_eyes·MaskedMSE(eyes)` on the tape.
///
/// `pred` is `frames·n × C` tokens, `target` the matching constant;
/// `masks` are at latent resolution (`n` tokens) and broadcast over frames
/// and channels.
pub fn region_loss_var(
    g: &mut Graph,
    pred: Var,
    target: &Tensor,
    masks: &RegionMaskSet,
    frames: usize,
    lambda_mouth: f64,
    lambda_eyes: f64,
) -> Result<Var> {
    let (rows, c) = g.value(pred).rows_cols();
    if target.shape() != g.value(pred).shape() {
        return Err(shape_err!("prediction {:?} vs target {:?}", g.value(pred).shape(), target.shape()));
    }
    if rows != frames * masks.tokens() {
        return Err(shape_err!("{rows} tokens are not {frames} frames of {} mask tokens", masks.tokens()));
    }
    let t = g.constant(target);
    let diff = g.tape.sub(pred, t);
    let sq = g.tape.square(diff);
    let total = g.tape.sum_all(sq);
    let mut loss = g.tape.scale(total, 1.0 / (rows * c) as f64);
    for (r, lambda) in [(Region::Mouth, lambda_mouth), (Region::Eyes, lambda_eyes)] {
        if lambda == 0.0 {
            continue;
        }
        let m = masks.tiled(r, frames);
        let weight = m.sum() * c as f64;
        let mv = g.constant(&m);
        let masked = g.tape.mul_col(sq, mv);
        let s = g.tape.sum_all(masked);
        let term = g.tape.scale(s, lambda / weight.max(MASK_EPS));
        loss = g.tape.add(loss, term);
    }
    Ok(loss)
}

/// Tensor-level [`region_loss_var`]. `eps_pred` and `eps_true` are
/// `C × H × W` or `F × C × H × W`.
pub fn region_weighted_loss(
    eps_pred: &Tensor,
    eps_true: &Tensor,
    masks: &RegionMaskSet,
    lambda_mouth: f64,
    lambda_eyes: f64,
) -> Result<f64> {
    if eps_pred.shape() != eps_true.shape() {
        return Err(shape_err!("prediction {:?} vs target {:?}", eps_pred.shape(), eps_true.shape()));
    }
    if lambda_mouth < 0.0 || lambda_eyes < 0.0 {
        return Err(config_err!("loss weights must be non-negative"));
    }
    let as4 = |t: &Tensor| match t.rank() {
        3 => t.reshape([1, t.shape()[0], t.shape()[1], t.shape()[2]]),
        4 => Ok(t.clone()),
        _ => Err(shape_err!("expected C × H × W or F × C × H × W, got {:?}", t.shape())),
    };
    let (p, e) = (as4(eps_pred)?, as4(eps_true)?);
    if (p.shape()[2], p.shape()[3]) != masks.dims() {
        return Err(shape_err!("masks {:?} do not match latent {:?}", masks.dims(), p.shape()));
    }
    let empty = ParamStore::new();
    let mut g = Graph::frozen(&empty);
    let pv = g.constant(&latent_to_tokens(&p)?);
    let l = region_loss_var(&mut g, pv, &latent_to_tokens(&e)?, masks, p.shape()[0], lambda_mouth, lambda_eyes)?;
    Ok(g.tape.scalar(l))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: i32,
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    /// Applies one update to every parameter named in `grads`.
    pub fn update(&mut self, params: &mut ParamStore, grads: &ParamStore) -> Result<()> {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (name, g) in grads.iter() {
            let p = params
                .get_mut(name)
                .ok_or_else(|| config_err!("gradient for unknown parameter `{name}`"))?;
            let m = self.m.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
            let dt = p.dtype();
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let upd = self.lr * (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w = dt.round(*w - upd);
            }
        }
        Ok(())
    }
}

fn default_lr() -> f64 {
    1e-5
}
fn default_steps() -> usize {
    100
}
fn default_batch() -> usize {
    1
}
fn default_lambda_mouth() -> f64 {
    0.5
}
fn default_lambda_eyes() -> f64 {
    0.25
}
fn default_true() -> bool {
    true
}

/// Training run settings; the JSON form is the `train` config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: u8,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lambda_mouth")]
    pub lambda_mouth: f64,
    #[serde(default = "default_lambda_eyes")]
    pub lambda_eyes: f64,
    pub seed: u64,
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelConfig,
    /// Draw each sample's timestep and noise once and reuse them every step.
    #[serde(default)]
    pub fixed_noise: bool,
    /// Stage 2 also updates the fusion blocks and the audio projection.
    #[serde(default = "default_true")]
    pub finetune_fusion: bool,
    /// Stop once the loss falls to this fraction of the first step's loss.
    #[serde(default)]
    pub stop_ratio: Option<f64>,
}

impl TrainConfig {
    pub fn new(stage: u8, seed: u64) -> Self {
        Self {
            stage,
            lr: default_lr(),
            steps: default_steps(),
            batch: default_batch(),
            lambda_mouth: default_lambda_mouth(),
            lambda_eyes: default_lambda_eyes(),
            seed,
            data_dir: None,
            out_dir: None,
            model: ModelConfig::default(),
            fixed_noise: false,
            finetune_fusion: true,
            stop_ratio: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.stage != 1 && self.stage != 2 {
            return Err(config_err!("stage must be 1 or 2, got {}", self.stage));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(config_err!("lr must be positive, got {}", self.lr));
        }
        if !(self.lambda_mouth >= 0.0 && self.lambda_eyes >= 0.0) {
            return Err(config_err!("lambda_mouth and lambda_eyes must be non-negative"));
        }
        if self.batch == 0 {
            return Err(config_err!("batch must be at least 1"));
        }
        if let Some(r) = self.stop_ratio {
            if !(0.0..1.0).contains(&r) {
                return Err(config_err!("stop_ratio must lie in [0, 1)"));
            }
        }
        self.model.validate()
    }
}

/// Whether parameter `name` is updated in `stage`.
pub fn is_trainable(stage: u8, finetune_fusion: bool, name: &str) -> bool {
    let temporal = name.contains(".temporal.");
    match stage {
        1 => !temporal,
        _ => temporal || (finetune_fusion && (name.contains(".fusion.") || name.starts_with("audio_proj."))),
    }
}

/// The optimizer's parameter list for `cfg`.
pub fn trainable_names(cfg: &TrainConfig, params: &ParamStore) -> Vec<String> {
    params
        .names()
        .filter(|n| is_trainable(cfg.stage, cfg.finetune_fusion, n))
        .map(str::to_string)
        .collect()
}

/// Outcome of a training run.
#[derive(Clone, Debug, Serialize)]
pub struct TrainReport {
    pub stage: u8,
    pub losses: Vec<f64>,
    pub checksum: String,
    pub wall_time_s: f64,
    pub trainable_values: usize,
}

impl TrainReport {
    pub fn initial_loss(&self) -> f64 {
        self.losses.first().copied().unwrap_or(f64::NAN)
    }

    pub fn final_loss(&self) -> f64 {
        self.losses.last().copied().unwrap_or(f64::NAN)
    }

    /// Largest fractional drop from the first loss seen so far.
    pub fn best_reduction(&self) -> f64 {
        let first = self.initial_loss();
        let best = self.losses.iter().copied().fold(f64::INFINITY, f64::min);
        1.0 - best / first
    }
}

/// One noised training example, already cut to the frames being denoised.
#[derive(Clone, Copy, Debug)]
pub struct StepInputs<'a> {
    /// `C × H × W`.
    pub ref_latent: &'a Tensor,
    /// `F × C × H × W` clean latents.
    pub target: &'a Tensor,
    /// `M × C × H × W` clean preceding frames; requires `temporal`.
    pub motion: Option<&'a Tensor>,
    pub temporal: bool,
    /// `F × l × c_audio`.
    pub audio: &'a Tensor,
    /// At latent resolution.
    pub masks: &'a RegionMaskSet,
    pub t: usize,
    /// `F × C × H × W`.
    pub noise: &'a Tensor,
}

/// Region-weighted noise-prediction loss of one example and its gradients
/// with respect to every parameter `trainable` selects.
pub fn step_loss(
    cfg: &ModelConfig,
    schedule: &DiffusionSchedule,
    params: &ParamStore,
    inp: &StepInputs,
    lambdas: (f64, f64),
    trainable: &dyn Fn(&str) -> bool,
) -> Result<(f64, ParamStore)> {
    let frames = cfg.check_latents(inp.target, "target")?;
    if inp.noise.shape() != inp.target.shape() {
        return Err(shape_err!("noise {:?} vs target {:?}", inp.noise.shape(), inp.target.shape()));
    }
    let [c, h, w] = cfg.frame_shape();
    if inp.ref_latent.shape() != [c, h, w] {
        return Err(shape_err!("reference latent {:?} is not {:?}", inp.ref_latent.shape(), cfg.frame_shape()));
    }
    let x_t = add_noise(inp.target, inp.t, schedule, inp.noise)?;
    let mut g = Graph::new(params, trainable);
    let r = g.constant(&latent_to_tokens(&inp.ref_latent.reshape([1, c, h, w])?)?);
    let reference = refnet_var(&mut g, cfg, r, 1)?;
    let motion = match inp.motion {
        Some(m) => {
            let mf = cfg.check_latents(m, "motion frames")?;
            let mv = g.constant(&latent_to_tokens(m)?);
            Some(refnet_var(&mut g, cfg, mv, mf)?)
        }
        None => None,
    };
    if inp.audio.rank() != 3 || inp.audio.shape()[0] != frames {
        return Err(shape_err!("audio {:?} does not cover {frames} frames", inp.audio.shape()));
    }
    let audio = audio_var(&mut g, cfg, inp.audio)?;
    let cond = Conditioning {
        reference,
        temporal: inp.temporal,
        motion,
        audio,
        masks: level_masks(cfg, inp.masks)?,
    };
    let x = g.constant(&latent_to_tokens(&x_t)?);
    let pred = eps_var(&mut g, cfg, x, frames, inp.t, &cond, &RegionScales::default())?;
    let target = latent_to_tokens(inp.noise)?;
    let loss = region_loss_var(&mut g, pred, &target, inp.masks, frames, lambdas.0, lambdas.1)?;
    let value = g.tape.scalar(loss);
    let grads = g.tape.backward(loss).params(&g.tape);
    let grads = grads
        .iter()
        .filter(|(n, _)| trainable(n))
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    Ok((value, grads))
}

struct Draw {
    t: usize,
    noise: Tensor,
}

fn draw(rng: &mut Rng, timesteps: usize, shape: [usize; 4]) -> Draw {
    let t = rng.below(timesteps);
    Draw {
        t,
        noise: rng.normal_tensor(shape),
    }
}

fn add_scaled(acc: &mut Option<ParamStore>, g: ParamStore, s: f64) {
    match acc {
        None => *acc = Some(g.iter().map(|(n, t)| (n.to_string(), t.map(|v| v * s))).collect()),
        Some(a) => {
            for (n, t) in g.iter() {
                let dst = a.get_mut(n).expect("same parameter set every sample");
                dst.data_mut().iter_mut().zip(t.data()).for_each(|(d, v)| *d += v * s);
            }
        }
    }
}

/// Shared loop: `example(rng, index)` yields the inputs of the sample at
/// `index`; batches draw indices uniformly with replacement.
fn run<F>(model: &mut Denoiser, cfg: &TrainConfig, n_samples: usize, mut loss_of: F) -> Result<TrainReport>
where
    F: FnMut(&ParamStore, usize, &Draw, &dyn Fn(&str) -> bool) -> Result<(f64, ParamStore)>,
{
    let started = Instant::now();
    let schedule_t = model.config.timesteps;
    let stage = cfg.stage;
    let finetune = cfg.finetune_fusion;
    let trainable = move |n: &str| is_trainable(stage, finetune, n);
    let names = trainable_names(cfg, &model.params);
    let trainable_values = names.iter().map(|n| model.params.get(n).map_or(0, Tensor::len)).sum();
    let mut rng = Rng::new(cfg.seed);
    let shape = |frames: usize| {
        let [c, h, w] = model.config.frame_shape();
        [frames, c, h, w]
    };
    let frames = if stage == 1 { 1 } else { model.config.video_length };
    let fixed: Vec<Draw> = if cfg.fixed_noise {
        (0..n_samples)
            .map(|i| draw(&mut rng.split(i as u64), schedule_t, shape(frames)))
            .collect()
    } else {
        Vec::new()
    };
    let mut adam = Adam::new(cfg.lr);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc = None;
        let mut total = 0.0;
        for _ in 0..cfg.batch {
            let idx = rng.below(n_samples);
            let fresh;
            let d = if cfg.fixed_noise {
                &fixed[idx]
            } else {
                fresh = draw(&mut rng, schedule_t, shape(frames));
                &fresh
            };
            let (l, g) = loss_of(&model.params, idx, d, &trainable)?;
            total += l / cfg.batch as f64;
            add_scaled(&mut acc, g, 1.0 / cfg.batch as f64);
        }
        if !total.is_finite() {
            return Err(Error::Numeric(format!("non-finite loss at step {step}")));
        }
        losses.push(total);
        adam.update(&mut model.params, &acc.unwrap_or_default())?;
        if let Some(r) = cfg.stop_ratio {
            if total <= r * losses[0] {
                break;
            }
        }
    }
    Ok(TrainReport {
        stage,
        losses,
        checksum: model.params.checksum(),
        wall_time_s: started.elapsed().as_secs_f64(),
        trainable_values,
    })
}

/// Stage 1: single frames, temporal modules skipped and frozen.
pub fn train_stage1(model: &mut Denoiser, data: &[ImageSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.stage != 1 {
        return Err(config_err!("train_stage1 needs stage 1, got {}", cfg.stage));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("no training images".into()));
    }
    let mc = model.config.clone();
    let schedule = DiffusionSchedule::scaled_linear(mc.timesteps)?;
    let [c, h, w] = mc.frame_shape();
    let targets = data
        .iter()
        .map(|s| {
            let a = s.audio.reshape([1, mc.audio_context, mc.audio_channels]).map_err(|_| {
                shape_err!("audio block {:?} is not {} × {}", s.audio.shape(), mc.audio_context, mc.audio_channels)
            })?;
            Ok((s.target.reshape([1, c, h, w])?, a))
        })
        .collect::<Result<Vec<_>>>()?;
    let lambdas = (cfg.lambda_mouth, cfg.lambda_eyes);
    run(model, cfg, data.len(), |params, i, d, tr| {
        let inp = StepInputs {
            ref_latent: &data[i].ref_latent,
            target: &targets[i].0,
            motion: None,
            temporal: false,
            audio: &targets[i].1,
            masks: &data[i].masks,
            t: d.t,
            noise: &d.noise,
        };
        step_loss(&mc, &schedule, params, &inp, lambdas, tr)
    })
}

/// Stage 2: `F`-frame windows preceded by `M` motion frames.
///
/// Each clip must hold at least `M + F` frames; every example uses the
/// clip's first `M + F` frames.
pub fn train_stage2(model: &mut Denoiser, data: &[ClipSample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if cfg.stage != 2 {
        return Err(config_err!("train_stage2 needs stage 2, got {}", cfg.stage));
    }
    if data.is_empty() {
        return Err(Error::EmptyInput("no training clips".into()));
    }
    let mc = model.config.clone();
    let (f, m) = (mc.video_length, mc.motion_frames);
    let schedule = DiffusionSchedule::scaled_linear(mc.timesteps)?;
    let mut parts = Vec::with_capacity(data.len());
    for (i, s) in data.iter().enumerate() {
        let have = mc.check_latents(&s.frames, "clip")?;
        if have < m + f || s.audio.frames() < m + f {
            return Err(Error::Input(format!(
                "clip {i} has {have} frames and {} audio blocks; {} motion + {} target frames are needed",
                s.audio.frames(),
                m,
                f
            )));
        }
        let motion = if m > 0 { Some(s.frames.slice0(0, m)?) } else { None };
        parts.push((motion, s.frames.slice0(m, m + f)?, s.audio.frame_range(0, m, m + f)?));
    }
    let lambdas = (cfg.lambda_mouth, cfg.lambda_eyes);
    run(model, cfg, data.len(), |params, i, d, tr| {
        let (motion, target, audio) = &parts[i];
        let inp = StepInputs {
            ref_latent: &data[i].ref_latent,
            target,
            motion: motion.as_ref(),
            temporal: true,
            audio,
            masks: &data[i].masks,
            t: d.t,
            noise: &d.noise,
        };
        step_loss(&mc, &schedule, params, &inp, lambdas, tr)
    })
}

/// Finite-difference check of one training example's gradients over every
/// parameter `cfg.stage` trains. The example is built from `clip` the way
/// the stage builds it, at timestep `t` with noise from `noise_seed`.
pub fn check_step_gradients(
    model: &Denoiser,
    clip: &ClipSample,
    cfg: &TrainConfig,
    t: usize,
    noise_seed: u64,
    eps: f64,
) -> Result<GradReport> {
    cfg.validate()?;
    let mc = &model.config;
    let schedule = DiffusionSchedule::scaled_linear(mc.timesteps)?;
    let [c, h, w] = mc.frame_shape();
    let have = mc.check_latents(&clip.frames, "clip")?;
    let (motion, target, audio) = if cfg.stage == 1 {
        let a = clip.audio.frame_range(0, 0, 1)?;
        (None, clip.frames.index_axis0(0)?.reshape([1, c, h, w])?, a)
    } else {
        let (f, m) = (mc.video_length, mc.motion_frames);
        if have < m + f || clip.audio.frames() < m + f {
            return Err(Error::Input(format!("clip has {have} frames; {} are needed", m + f)));
        }
        let motion = if m > 0 { Some(clip.frames.slice0(0, m)?) } else { None };
        (motion, clip.frames.slice0(m, m + f)?, clip.audio.frame_range(0, m, m + f)?)
    };
    let noise = Rng::new(noise_seed).normal_tensor(target.shape());
    let inp = StepInputs {
        ref_latent: &clip.ref_latent,
        target: &target,
        motion: motion.as_ref(),
        temporal: cfg.stage == 2,
        audio: &audio,
        masks: &clip.masks,
        t,
        noise: &noise,
    };
    let names = trainable_names(cfg, &model.params);
    let subset: ParamStore = names
        .iter()
        .map(|n| (n.clone(), model.params.get(n).expect("listed").clone()))
        .collect();
    let base = model.params.clone();
    let lambdas = (cfg.lambda_mouth, cfg.lambda_eyes);
    grad_check(
        |p: &ParamStore| {
            let mut full = base.clone();
            for (n, v) in p.iter() {
                full.insert(n, v.clone());
            }
            step_loss(mc, &schedule, &full, &inp, lambdas, &|n| p.contains(n))
        },
        &subset,
        eps,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    fn one_pixel_masks() -> RegionMaskSet {
        let mut mouth = Tensor::zeros([2, 2]);
        mouth.data_mut()[3] = 1.0;
        RegionMaskSet::new(Tensor::full([2, 2], 1.0), mouth, Tensor::zeros([2, 2])).unwrap()
    }

    #[test]
    fn hand_computed_region_loss() {
        let masks = one_pixel_masks();
        let truth = Tensor::zeros([1, 2, 2]);
        let mut pred = truth.clone();
        pred.data_mut()[3] = 1.0;
        let l = region_weighted_loss(&pred, &truth, &masks, 1.0, 0.0).unwrap();
        assert!((l - 1.25).abs() < 1e-15);
        assert_eq!(region_weighted_loss(&pred, &truth, &masks, 0.0, 0.0).unwrap(), 0.25);
        assert_eq!(region_weighted_loss(&truth, &truth, &masks, 1.0, 1.0).unwrap(), 0.0);
        // eyes mask is empty: guarded to zero
        assert_eq!(region_weighted_loss(&pred, &truth, &masks, 0.0, 5.0).unwrap(), 0.25);
        assert!(region_weighted_loss(&pred, &truth, &masks, -1.0, 0.0).is_err());
    }

    fn random_case(seed: u64) -> (Tensor, Tensor, RegionMaskSet) {
        let mut rng = Rng::new(seed);
        let m = RegionMaskSet::new(
            rng.uniform_tensor([3, 3], 0.0, 1.0),
            rng.uniform_tensor([3, 3], 0.0, 1.0),
            rng.uniform_tensor([3, 3], 0.0, 1.0),
        )
        .unwrap();
        (rng.normal_tensor([2, 2, 3, 3]), rng.normal_tensor([2, 2, 3, 3]), m)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn loss_nonnegative_and_monotone(seed in 0u64..10_000, a in 0.0f64..2.0, b in 0.0f64..2.0, da in 0.0f64..1.0) {
            let (p, e, m) = random_case(seed);
            let l = region_weighted_loss(&p, &e, &m, a, b).unwrap();
            prop_assert!(l > 0.0);
            prop_assert!(region_weighted_loss(&p, &p, &m, a, b).unwrap() == 0.0);
            prop_assert!(region_weighted_loss(&p, &e, &m, a + da, b).unwrap() >= l);
            prop_assert!(region_weighted_loss(&p, &e, &m, a, b + da).unwrap() >= l);
        }
    }

    #[test]
    fn masked_term_matches_oracle() {
        let (p, e, m) = random_case(3);
        let mouth = m.get(Region::Mouth).data();
        let (mut num, mut den, mut sq) = (0.0, 0.0, 0.0);
        for (i, (a, b)) in p.data().iter().zip(e.data()).enumerate() {
            let d2 = (a - b).powi(2);
            sq += d2;
            num += mouth[i % 9] * d2;
            den += mouth[i % 9];
        }
        let want = sq / 36.0 + 0.7 * num / den;
        assert!((region_weighted_loss(&p, &e, &m, 0.7, 0.0).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn stage_parameter_lists() {
        let d = Denoiser::init(ModelConfig::tiny(), 1).unwrap();
        let s1 = trainable_names(&TrainConfig::new(1, 0), &d.params);
        assert!(!s1.is_empty() && s1.iter().all(|n| !n.contains(".temporal.")));
        assert!(s1.iter().any(|n| n.starts_with("refnet.")));
        let s2 = trainable_names(&TrainConfig::new(2, 0), &d.params);
        assert!(s2.iter().any(|n| n.contains(".temporal.")));
        assert!(s2.iter().all(|n| !n.starts_with("refnet.") && !n.contains(".spatial.")));
        let frozen = TrainConfig { finetune_fusion: false, ..TrainConfig::new(2, 0) };
        assert!(trainable_names(&frozen, &d.params).iter().all(|n| n.contains(".temporal.")));
    }

    #[test]
    fn config_json_and_validation() {
        let c: TrainConfig = serde_json::from_str(r#"{"stage": 2, "seed": 4, "steps": 3}"#).unwrap();
        assert_eq!((c.lr, c.lambda_mouth, c.lambda_eyes, c.batch), (1e-5, 0.5, 0.25, 1));
        assert!(serde_json::from_str::<TrainConfig>(r#"{"stage": 2, "seed": 4, "bogus": 1}"#).is_err());
        assert!(TrainConfig { lr: 0.0, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { stage: 3, ..c.clone() }.validate().is_err());
        assert!(TrainConfig { lambda_eyes: -1.0, ..c }.validate().is_err());
    }

    fn tiny_clip(frames: usize, seed: u64) -> (ModelConfig, SyntheticClip) {
        let cfg = ModelConfig::tiny();
        let clip = synthetic_clip(&cfg, frames, seed).unwrap();
        (cfg, clip)
    }

    #[test]
    fn stage2_gradients_match_finite_differences() {
        let (cfg, clip) = tiny_clip(3, 2);
        let mut rng = Rng::new(5);
        // move every parameter off its structured init so each path carries gradient
        let params: ParamStore = Denoiser::init(cfg.clone(), 3)
            .unwrap()
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.zip_with(&rng.normal_tensor(t.shape()), |a, b| a + 0.2 * b).unwrap()))
            .collect();
        let schedule = DiffusionSchedule::scaled_linear(cfg.timesteps).unwrap();
        let motion = clip.latents.slice0(0, 1).unwrap();
        let target = clip.latents.slice0(1, 3).unwrap();
        let audio = clip.audio_blocks(cfg.audio_context).unwrap().frame_range(0, 1, 3).unwrap();
        let noise = rng.normal_tensor(target.shape());
        let inp = StepInputs {
            ref_latent: &clip.ref_latent,
            target: &target,
            motion: Some(&motion),
            temporal: true,
            audio: &audio,
            masks: &clip.masks,
            t: 4,
            noise: &noise,
        };
        let subset: Vec<String> = params
            .names()
            .filter(|n| n.contains("levels.1") || n.starts_with("audio_proj") || n.contains("conv_out"))
            .map(str::to_string)
            .collect();
        let probe: ParamStore = subset.iter().map(|n| (n.clone(), params.get(n).unwrap().clone())).collect();
        let report = grad_check(
            |p: &ParamStore| {
                let mut full = params.clone();
                for (n, t) in p.iter() {
                    full.insert(n, t.clone());
                }
                let (l, g) = step_loss(&cfg, &schedule, &full, &inp, (0.5, 0.25), &|_| true)?;
                Ok((l, g.iter().filter(|(n, _)| p.contains(n)).map(|(n, t)| (n.to_string(), t.clone())).collect()))
            },
            &probe,
            1e-5,
        )
        .unwrap();
        assert!(report.passed(1e-6), "{} [{}]: {}", report.worst_param, report.worst_index, report.max_rel_error);
    }

    #[test]
    fn stage1_overfits_and_is_deterministic() {
        let (cfg, clip) = tiny_clip(2, 7);
        let data = &clip.image_samples(cfg.audio_context).unwrap()[..1];
        let tc = TrainConfig {
            lr: 3e-3,
            steps: 300,
            fixed_noise: true,
            model: cfg.clone(),
            ..TrainConfig::new(1, 11)
        };
        let mut a = Denoiser::init(cfg.clone(), 1).unwrap();
        let ra = train_stage1(&mut a, data, &tc).unwrap();
        assert!(ra.best_reduction() >= 0.9, "reduction {}", ra.best_reduction());
        let mut b = Denoiser::init(cfg.clone(), 1).unwrap();
        let rb = train_stage1(&mut b, data, &TrainConfig { steps: 5, ..tc.clone() }).unwrap();
        assert_eq!(&ra.losses[..5], &rb.losses[..]);
        let before = Denoiser::init(cfg, 1).unwrap();
        for (n, t) in a.params.iter() {
            if n.contains(".temporal.") {
                assert!(t.bit_eq(before.params.get(n).unwrap()), "{n} moved in stage 1");
            }
        }
    }

    #[test]
    fn stage2_rejects_short_clips() {
        let (cfg, clip) = tiny_clip(2, 1);
        let mut d = Denoiser::init(cfg.clone(), 1).unwrap();
        let tc = TrainConfig { model: cfg.clone(), steps: 1, ..TrainConfig::new(2, 0) };
        let err = train_stage2(&mut d, &[clip.clip_sample(cfg.audio_context).unwrap()], &tc).unwrap_err();
        assert!(matches!(err, Error::Input(_)));
        assert!(matches!(train_stage2(&mut d, &[], &tc), Err(Error::EmptyInput(_))));
        assert!(matches!(train_stage1(&mut d, &[], &tc), Err(Error::Config(_))));
    }

    #[test]
    fn whole_step_gradient_check_at_tiny_config() {
        let mc = ModelConfig::tiny();
        let clip = synthetic_clip(&mc, 4, 1).unwrap().clip_sample(mc.audio_context).unwrap();
        let mut rng = Rng::new(6);
        let mut model = Denoiser::init(mc.clone(), 2).unwrap();
        for (_, t) in model.params.iter_mut() {
            let n = rng.normal_tensor(t.shape());
            *t = t.zip_with(&n, |a, b| a + 0.1 * b).unwrap();
        }
        for stage in [1, 2] {
            let mut tc = TrainConfig::new(stage, 0);
            tc.model = mc.clone();
            let r = check_step_gradients(&model, &clip, &tc, 6, 9, 1e-5).unwrap();
            assert_eq!(r.per_param.len(), trainable_names(&tc, &model.params).len());
            assert!(r.passed(1e-6), "stage {stage}: {} at {}", r.max_rel_error, r.worst_param);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Denoiser::init(ModelConfig::tiny(), 4).unwrap();
        m.save(dir.path(), serde_json::json!({"steps": 3})).unwrap();
        let back = Denoiser::load(dir.path()).unwrap();
        assert_eq!(back.config, m.config);
        assert_eq!(back.params.checksum(), m.params.checksum());
    }
}