use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::fusion::{fusion_block_var, init_fusion_params, prepare_region_masks, FusionConfig, RegionMaskSet, RegionScales};
use crate::nn::{Graph, Init};
use crate::numerics::{timestep_embedding, ParamStore, Rng, Tensor, Var};

/// Shape of the toy denoiser.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent height `H`.
    pub height: usize,
    /// Latent width `W`.
    pub width: usize,
    /// Latent channels `C`.
    pub channels: usize,
    /// Token width `c`.
    pub model_width: usize,
    pub heads: usize,
    /// Resolution levels; each halves the grid and holds one fusion block.
    pub levels: usize,
    /// Frames generated per chunk, `F`.
    pub video_length: usize,
    /// Preceding frames fed to temporal attention, `M`.
    pub motion_frames: usize,
    /// Audio frames per video frame, `l` (odd).
    pub audio_context: usize,
    pub gate_width: usize,
    /// Width of the speech-encoder features before projection.
    pub audio_channels: usize,
    pub time_embed_dim: usize,
    /// Feed-forward expansion factor.
    pub ff_mult: usize,
    /// Diffusion timesteps `T`.
    pub timesteps: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            height: 16,
            width: 16,
            channels: 4,
            model_width: 64,
            heads: 4,
            levels: 2,
            video_length: 12,
            motion_frames: 4,
            audio_context: 5,
            gate_width: 64,
            audio_channels: 32,
            time_embed_dim: 64,
            ff_mult: 2,
            timesteps: 50,
        }
    }
}

impl ModelConfig {
    /// A very small configuration for gradient checks and quick tests.
    pub fn tiny() -> Self {
        Self {
            height: 4,
            width: 4,
            channels: 2,
            model_width: 8,
            heads: 2,
            levels: 2,
            video_length: 2,
            motion_frames: 1,
            audio_context: 3,
            gate_width: 8,
            audio_channels: 4,
            time_embed_dim: 8,
            ff_mult: 2,
            timesteps: 10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("model_width", self.model_width),
            ("heads", self.heads),
            ("levels", self.levels),
            ("video_length", self.video_length),
            ("audio_context", self.audio_context),
            ("gate_width", self.gate_width),
            ("audio_channels", self.audio_channels),
            ("time_embed_dim", self.time_embed_dim),
            ("ff_mult", self.ff_mult),
            ("timesteps", self.timesteps),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(config_err!("{name} must be positive"));
        }
        if self.model_width % self.heads != 0 {
            return Err(config_err!("{} heads do not divide width {}", self.heads, self.model_width));
        }
        let f = 1 << (self.levels - 1);
        if self.height % f != 0 || self.width % f != 0 {
            return Err(config_err!(
                "{}×{} latent cannot be halved {} times",
                self.height,
                self.width,
                self.levels - 1
            ));
        }
        if self.audio_context % 2 == 0 {
            return Err(config_err!("audio_context {} must be odd", self.audio_context));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(config_err!("time_embed_dim must be even"));
        }
        Ok(())
    }

    pub fn fusion_config(&self) -> FusionConfig {
        FusionConfig {
            width: self.model_width,
            audio_width: self.model_width,
            gate_width: self.gate_width,
            heads: self.heads,
            time_embed_dim: self.time_embed_dim,
            timesteps: self.timesteps,
        }
    }

    /// Token grid at level `k`.
    pub fn level_dims(&self, k: usize) -> (usize, usize) {
        (self.height >> k, self.width >> k)
    }

    pub fn level_tokens(&self, k: usize) -> usize {
        let (h, w) = self.level_dims(k);
        h * w
    }

    /// Per-frame latent shape `C × H × W`.
    pub fn frame_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub(crate) fn check_latents(&self, x: &Tensor, what: &str) -> Result<usize> {
        if x.rank() != 4 || x.shape()[1..] != self.frame_shape() {
            return Err(shape_err!(
                "{what} must be frames × {:?}, got {:?}",
                self.frame_shape(),
                x.shape()
            ));
        }
        Ok(x.shape()[0])
    }
}

/// Token states captured from the reference twin, one `n_k × c` tensor per
/// level (or `frames·n_k × c` for several input frames).
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceFeatures {
    pub levels: Vec<Tensor>,
}

/// `F × C × H × W` latents to `F·H·W × C` tokens, frame-major.
pub fn latent_to_tokens(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 4 {
        return Err(shape_err!("expected F × C × H × W latents, got {:?}", x.shape()));
    }
    let (f, c, n) = (x.shape()[0], x.shape()[1], x.shape()[2] * x.shape()[3]);
    let d = x.data();
    let mut out = vec![0.0; x.len()];
    for fi in 0..f {
        for ch in 0..c {
            for p in 0..n {
                out[(fi * n + p) * c + ch] = d[(fi * c + ch) * n + p];
            }
        }
    }
    Tensor::with_dtype(x.dtype(), [f * n, c], out)
}

/// Inverse of [`latent_to_tokens`].
pub fn tokens_to_latent(t: &Tensor, frames: usize, h: usize, w: usize) -> Result<Tensor> {
    let (rows, c) = t.dims2()?;
    let n = h * w;
    if rows != frames * n {
        return Err(shape_err!("{rows} tokens do not form {frames} frames of {h}×{w}"));
    }
    let d = t.data();
    let mut out = vec![0.0; t.len()];
    for fi in 0..frames {
        for ch in 0..c {
            for p in 0..n {
                out[(fi * c + ch) * n + p] = d[(fi * n + p) * c + ch];
            }
        }
    }
    Tensor::with_dtype(t.dtype(), [frames, c, h, w], out)
}

/// Fresh parameters for the denoiser, its reference twin and the audio
/// projection.
pub fn init_model_params(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamStore> {
    cfg.validate()?;
    let c = cfg.model_width;
    let mut store = ParamStore::new();
    let mut init = Init { store: &mut store, rng };
    init.linear("audio_proj.fc1", cfg.audio_channels, c, 1.0);
    init.linear("audio_proj.fc2", c, c, 1.0);
    for net in ["unet", "refnet"] {
        init.linear(&format!("{net}.conv_in"), cfg.channels, c, 1.0);
        init.linear(&format!("{net}.time.fc1"), cfg.time_embed_dim, c, 1.0);
        init.linear(&format!("{net}.time.fc2"), c, c, 1.0);
        for k in 0..cfg.levels {
            let p = format!("{net}.levels.{k}");
            init.layer_norm(&format!("{p}.spatial.norm"), c);
            init.attention(&format!("{p}.spatial.attn"), c, c, c, 0.5);
            if net == "refnet" && k + 1 == cfg.levels {
                // the twin's last block output is never read
                continue;
            }
            if net == "unet" {
                init_fusion_params(&mut init, &format!("{p}.fusion"), &cfg.fusion_config());
                init.layer_norm(&format!("{p}.temporal.norm"), c);
                init.attention(&format!("{p}.temporal.attn"), c, c, c, 0.5);
            }
            init.layer_norm(&format!("{p}.ff.norm"), c);
            init.linear(&format!("{p}.ff.fc1"), c, cfg.ff_mult * c, 1.0);
            init.linear(&format!("{p}.ff.fc2"), cfg.ff_mult * c, c, 0.5);
        }
    }
    init.layer_norm("unet.norm_out", c);
    init.linear("unet.conv_out", c, cfg.channels, 1.0);
    Ok(store)
}

fn time_var(g: &mut Graph, net: &str, cfg: &ModelConfig, t: usize) -> Result<Var> {
    let e = timestep_embedding(t, cfg.time_embed_dim)?;
    let e = g.constant(&e.reshape([1, cfg.time_embed_dim])?);
    let h = g.linear(&format!("{net}.time.fc1"), e)?;
    let h = g.tape.silu(h);
    g.linear(&format!("{net}.time.fc2"), h)
}

fn spatial_var(g: &mut Graph, p: &str, heads: usize, h: Var, frames: usize) -> Result<Var> {
    let n = g.layer_norm(&format!("{p}.spatial.norm"), h)?;
    let inc = g.attend(&format!("{p}.spatial.attn"), n, n, frames, heads, false)?;
    Ok(g.tape.add(h, inc))
}

fn ff_var(g: &mut Graph, p: &str, h: Var) -> Result<Var> {
    let n = g.layer_norm(&format!("{p}.ff.norm"), h)?;
    let a = g.linear(&format!("{p}.ff.fc1"), n)?;
    let a = g.tape.silu(a);
    let inc = g.linear(&format!("{p}.ff.fc2"), a)?;
    Ok(g.tape.add(h, inc))
}

/// Temporal attention of block `p`: `h` holds `frames` current frames of `n`
/// tokens, `motion` optionally `M` preceding frames. Every token position
/// attends along time over `M + frames` keys; only current frames are
/// returned, with a residual.
pub(crate) fn temporal_var(
    g: &mut Graph,
    p: &str,
    heads: usize,
    h: Var,
    motion: Option<Var>,
    frames: usize,
    n: usize,
) -> Result<Var> {
    let (rows, c) = g.value(h).rows_cols();
    if rows != frames * n {
        return Err(shape_err!("{rows} rows are not {frames} frames of {n} tokens"));
    }
    let m = match motion {
        Some(mv) => {
            let (mr, mc) = g.value(mv).rows_cols();
            if mr % n != 0 || mc != c {
                return Err(shape_err!("motion tokens {mr}×{mc} do not match {n} tokens of width {c}"));
            }
            mr / n
        }
        None => 0,
    };
    let all = match motion {
        Some(mv) => g.tape.concat_rows(&[mv, h]),
        None => h,
    };
    let normed = g.layer_norm(&format!("{p}.temporal.norm"), all)?;
    let q_idx = (0..n).flat_map(|pos| (0..frames).map(move |f| (m + f) * n + pos)).collect();
    let kv_idx = (0..n).flat_map(|pos| (0..m + frames).map(move |j| j * n + pos)).collect();
    let q = g.tape.gather_rows(normed, q_idx);
    let kv = g.tape.gather_rows(normed, kv_idx);
    let inc = g.attend(&format!("{p}.temporal.attn"), q, kv, n, heads, false)?;
    let back = (0..frames).flat_map(|f| (0..n).map(move |pos| pos * frames + f)).collect();
    let inc = g.tape.gather_rows(inc, back);
    Ok(g.tape.add(h, inc))
}

/// Reference twin: conv-in, time embedding at `t = 0`, then per level a
/// spatial self-attention whose output is captured, followed by a
/// feed-forward for every level but the last.
pub(crate) fn refnet_var(g: &mut Graph, cfg: &ModelConfig, tokens: Var, frames: usize) -> Result<Vec<Var>> {
    let mut h = g.linear("refnet.conv_in", tokens)?;
    let te = time_var(g, "refnet", cfg, 0)?;
    h = g.tape.add_row(h, te);
    let mut feats = Vec::with_capacity(cfg.levels);
    for k in 0..cfg.levels {
        if k > 0 {
            let (hh, ww) = cfg.level_dims(k - 1);
            h = g.tape.pool2x2(h, frames, hh, ww);
        }
        let p = format!("refnet.levels.{k}");
        h = spatial_var(g, &p, cfg.heads, h, frames)?;
        feats.push(h);
        if k + 1 < cfg.levels {
            h = ff_var(g, &p, h)?;
        }
    }
    Ok(feats)
}

/// Projects `F × l × c_audio` audio blocks into `F·l × c` tokens.
pub(crate) fn audio_var(g: &mut Graph, cfg: &ModelConfig, blocks: &Tensor) -> Result<Var> {
    if blocks.rank() != 3 || blocks.shape()[1] != cfg.audio_context || blocks.shape()[2] != cfg.audio_channels {
        return Err(shape_err!(
            "audio blocks must be frames × {} × {}, got {:?}",
            cfg.audio_context,
            cfg.audio_channels,
            blocks.shape()
        ));
    }
    let rows = blocks.shape()[0] * cfg.audio_context;
    let a = g.constant(&blocks.reshape([rows, cfg.audio_channels])?);
    let h = g.linear("audio_proj.fc1", a)?;
    let h = g.tape.silu(h);
    g.linear("audio_proj.fc2", h)
}

/// Tape handles of everything the trunk is conditioned on.
pub(crate) struct Conditioning {
    /// Per level, `n_k × c`.
    pub reference: Vec<Var>,
    /// Whether the temporal modules run at all.
    pub temporal: bool,
    /// Per level, `M·n_k × c`.
    pub motion: Option<Vec<Var>>,
    /// `F·l × c`.
    pub audio: Var,
    /// Region masks pooled to each level.
    pub masks: Vec<RegionMaskSet>,
}

pub(crate) fn level_masks(cfg: &ModelConfig, masks: &RegionMaskSet) -> Result<Vec<RegionMaskSet>> {
    if masks.dims() != (cfg.height, cfg.width) {
        return Err(shape_err!(
            "region masks are {:?}, latent is {}×{}",
            masks.dims(),
            cfg.height,
            cfg.width
        ));
    }
    (0..cfg.levels)
        .map(|k| {
            let (h, w) = cfg.level_dims(k);
            prepare_region_masks(masks, h, w)
        })
        .collect()
}

/// Noise prediction for `frames` frames of tokens `x` at timestep `t`.
pub(crate) fn eps_var(
    g: &mut Graph,
    cfg: &ModelConfig,
    x: Var,
    frames: usize,
    t: usize,
    cond: &Conditioning,
    scales: &RegionScales,
) -> Result<Var> {
    if t >= cfg.timesteps {
        return Err(Error::Domain(format!("timestep {t} outside 0..{}", cfg.timesteps)));
    }
    let fcfg = cfg.fusion_config();
    let mut h = g.linear("unet.conv_in", x)?;
    let te = time_var(g, "unet", cfg, t)?;
    h = g.tape.add_row(h, te);
    let mut skips = Vec::with_capacity(cfg.levels);
    for k in 0..cfg.levels {
        if k > 0 {
            let (hh, ww) = cfg.level_dims(k - 1);
            h = g.tape.pool2x2(h, frames, hh, ww);
        }
        let p = format!("unet.levels.{k}");
        h = spatial_var(g, &p, cfg.heads, h, frames)?;
        let fused = fusion_block_var(
            g,
            &format!("{p}.fusion"),
            &fcfg,
            h,
            cond.reference[k],
            cond.audio,
            frames,
            &cond.masks[k],
            t,
            scales,
        )?;
        h = fused.out;
        if cond.temporal {
            let motion = cond.motion.as_ref().map(|m| m[k]);
            h = temporal_var(g, &p, cfg.heads, h, motion, frames, cfg.level_tokens(k))?;
        }
        h = ff_var(g, &p, h)?;
        skips.push(h);
    }
    for k in (0..cfg.levels - 1).rev() {
        let (hh, ww) = cfg.level_dims(k);
        let (_, cw) = cfg.level_dims(k + 1);
        let idx = (0..frames)
            .flat_map(|f| (0..hh * ww).map(move |pos| (f, pos)))
            .map(|(f, pos)| {
                let (y, x) = (pos / ww, pos % ww);
                f * cfg.level_tokens(k + 1) + (y / 2) * cw + x / 2
            })
            .collect();
        let up = g.tape.gather_rows(h, idx);
        h = g.tape.add(up, skips[k]);
    }
    let n = g.layer_norm("unet.norm_out", h)?;
    g.linear("unet.conv_out", n)
}

/// Conditioning for an inference call of [`Denoiser::predict_noise`].
#[derive(Clone, Copy, Debug)]
pub struct StepConditioning<'a> {
    pub reference: &'a ReferenceFeatures,
    /// Features of the preceding frames; `None` with `temporal` set runs
    /// plain temporal self-attention.
    pub motion: Option<&'a ReferenceFeatures>,
    pub temporal: bool,
    /// `F × l × c_audio` raw audio blocks for the frames being denoised.
    pub audio: &'a Tensor,
    /// Region masks at latent resolution.
    pub masks: &'a RegionMaskSet,
    pub scales: RegionScales,
}

/// The toy latent denoiser with its parameters.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Denoiser {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = init_model_params(&config, &mut Rng::new(seed))?;
        Ok(Self { config, params })
    }

    /// Wraps loaded parameters after checking them against a fresh
    /// initialization of `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let want = init_model_params(&config, &mut Rng::new(0))?;
        for (name, t) in want.iter() {
            let got = params.require(name)?;
            if got.shape() != t.shape() {
                return Err(shape_err!(
                    "parameter `{name}` is {:?}, config expects {:?}",
                    got.shape(),
                    t.shape()
                ));
            }
        }
        Ok(Self { config, params })
    }

    /// Writes a checkpoint directory; the manifest's `meta.model` holds the
    /// config, merged with `extra` when that is a JSON object.
    pub fn save(&self, dir: impl AsRef<std::path::Path>, extra: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::Map::new();
        if let serde_json::Value::Object(m) = extra {
            meta.extend(m);
        }
        meta.insert("model".into(), serde_json::to_value(&self.config)?);
        self.params.save(dir, serde_json::Value::Object(meta))
    }

    /// Reads a checkpoint written by [`Denoiser::save`].
    pub fn load(dir: impl AsRef<std::path::Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (params, manifest) = ParamStore::load(dir)?;
        let model = manifest.meta.get("model").cloned().ok_or_else(|| Error::Format {
            path: dir.join("manifest.json"),
            msg: "meta.model is missing".into(),
        })?;
        let config: ModelConfig = serde_json::from_value(model)?;
        config.validate()?;
        Self::from_params(config, params)
    }

    /// Runs the reference twin on one `C × H × W` latent.
    pub fn extract_reference_features(&self, ref_latent: &Tensor) -> Result<ReferenceFeatures> {
        if ref_latent.shape() != self.config.frame_shape() {
            return Err(shape_err!(
                "reference latent must be {:?}, got {:?}",
                self.config.frame_shape(),
                ref_latent.shape()
            ));
        }
        let [c, h, w] = self.config.frame_shape();
        self.frame_features(&ref_latent.reshape([1, c, h, w])?)
    }

    /// Runs the reference twin on `M × C × H × W` latents (motion frames).
    pub fn frame_features(&self, latents: &Tensor) -> Result<ReferenceFeatures> {
        let frames = self.config.check_latents(latents, "latents")?;
        let mut g = Graph::frozen(&self.params);
        let x = g.constant(&latent_to_tokens(latents)?);
        let vars = refnet_var(&mut g, &self.config, x, frames)?;
        Ok(ReferenceFeatures {
            levels: vars.into_iter().map(|v| g.value(v).clone()).collect(),
        })
    }

    /// Predicted noise for `F × C × H × W` latents at timestep `t`.
    pub fn predict_noise(&self, x_t: &Tensor, t: usize, cond: &StepConditioning) -> Result<Tensor> {
        let cfg = &self.config;
        let frames = cfg.check_latents(x_t, "x_t")?;
        if cond.audio.rank() != 3 || cond.audio.shape()[0] != frames {
            return Err(shape_err!("audio blocks {:?} do not cover {frames} frames", cond.audio.shape()));
        }
        check_features(cfg, cond.reference, 1)?;
        if let Some(m) = cond.motion {
            check_features(cfg, m, 0)?;
        }
        let mut g = Graph::frozen(&self.params);
        let x = g.constant(&latent_to_tokens(x_t)?);
        let reference = cond.reference.levels.iter().map(|t| g.constant(t)).collect();
        let motion = cond
            .motion
            .map(|m| m.levels.iter().map(|t| g.constant(t)).collect());
        let audio = audio_var(&mut g, cfg, cond.audio)?;
        let c = Conditioning {
            reference,
            temporal: cond.temporal,
            motion,
            audio,
            masks: level_masks(cfg, cond.masks)?,
        };
        let out = eps_var(&mut g, cfg, x, frames, t, &c, &cond.scales)?;
        tokens_to_latent(g.value(out), frames, cfg.height, cfg.width).map(|e| e.to_dtype(x_t.dtype()))
    }

    /// Temporal attention of level `level` on `F × n × c` current-frame
    /// tokens with optional `M × n × c` motion tokens.
    pub fn temporal_attention(&self, level: usize, current: &Tensor, motion: Option<&Tensor>) -> Result<Tensor> {
        temporal_attention(&self.params, &format!("unet.levels.{level}"), self.config.heads, current, motion)
    }
}

fn check_features(cfg: &ModelConfig, f: &ReferenceFeatures, frames: usize) -> Result<()> {
    if f.levels.len() != cfg.levels {
        return Err(shape_err!("{} feature levels, model has {}", f.levels.len(), cfg.levels));
    }
    for (k, t) in f.levels.iter().enumerate() {
        let (rows, c) = t.dims2()?;
        let n = cfg.level_tokens(k);
        let ok = c == cfg.model_width && rows % n == 0 && (frames == 0 || rows == frames * n);
        if !ok {
            return Err(shape_err!("level {k} features {:?} do not match {n} tokens of width {}", t.shape(), cfg.model_width));
        }
    }
    Ok(())
}

/// Tensor-level temporal attention of the block under `prefix`
/// (`{prefix}.temporal.*` parameters).
pub fn temporal_attention(
    params: &ParamStore,
    prefix: &str,
    heads: usize,
    current: &Tensor,
    motion: Option<&Tensor>,
) -> Result<Tensor> {
    if current.rank() != 3 {
        return Err(shape_err!("current frames must be F × n × c, got {:?}", current.shape()));
    }
    let (f, n, c) = (current.shape()[0], current.shape()[1], current.shape()[2]);
    if let Some(m) = motion {
        if m.rank() != 3 || m.shape()[1..] != current.shape()[1..] {
            return Err(shape_err!(
                "motion frames {:?} do not share the token layout {:?}",
                m.shape(),
                &current.shape()[1..]
            ));
        }
    }
    let mut g = Graph::frozen(params);
    let h = g.constant(&current.reshape([f * n, c])?);
    let mv = match motion {
        Some(m) => Some(g.constant(&m.reshape([m.shape()[0] * n, c])?)),
        None => None,
    };
    let out = temporal_var(&mut g, prefix, heads, h, mv, f, n)?;
    g.value(out).reshape([f, n, c]).map(|t| t.to_dtype(current.dtype()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::Region;
    use crate::numerics::ops::attention;
    use crate::numerics::{ops, LAYER_NORM_EPS};

    fn masks(cfg: &ModelConfig, seed: u64) -> RegionMaskSet {
        let mut rng = Rng::new(seed);
        let (h, w) = (cfg.height, cfg.width);
        RegionMaskSet::new(
            rng.uniform_tensor([h, w], 0.0, 1.0),
            rng.uniform_tensor([h, w], 0.0, 1.0),
            rng.uniform_tensor([h, w], 0.0, 1.0),
        )
        .unwrap()
    }

    #[test]
    fn config_defaults_and_validation() {
        let d = ModelConfig::default();
        assert_eq!((d.video_length, d.motion_frames, d.audio_context), (12, 4, 5));
        assert_eq!((d.height, d.width, d.channels, d.model_width, d.heads, d.timesteps), (16, 16, 4, 64, 4, 50));
        d.validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
        let bad = ModelConfig { audio_context: 4, ..d.clone() };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = ModelConfig { height: 15, ..d.clone() };
        assert!(bad.validate().is_err());
        let json: ModelConfig = serde_json::from_str(r#"{"video_length": 8}"#).unwrap();
        assert_eq!(json.video_length, 8);
        assert_eq!(json.motion_frames, 4);
    }

    #[test]
    fn token_layout_round_trips() {
        let x = Rng::new(1).normal_tensor([2, 3, 4, 2]);
        let t = latent_to_tokens(&x).unwrap();
        assert_eq!(t.shape(), &[16, 3]);
        assert_eq!(t.at(&[8 + 5, 2]), x.at(&[1, 2, 2, 1]));
        assert!(tokens_to_latent(&t, 2, 4, 2).unwrap().bit_eq(&x));
    }

    #[test]
    fn reference_features_follow_the_ladder() {
        let cfg = ModelConfig::default();
        let m = Denoiser::init(cfg.clone(), 3).unwrap();
        let r = Rng::new(4).normal_tensor(cfg.frame_shape());
        let a = m.extract_reference_features(&r).unwrap();
        let b = m.extract_reference_features(&r).unwrap();
        assert_eq!(a.levels.len(), cfg.levels);
        assert_eq!(a.levels[0].shape(), &[256, 64]);
        assert_eq!(a.levels[1].shape(), &[64, 64]);
        for (x, y) in a.levels.iter().zip(&b.levels) {
            assert!(x.bit_eq(y) && x.all_finite());
        }
        let wrong = Rng::new(4).normal_tensor([4, 8, 16]);
        assert!(matches!(m.extract_reference_features(&wrong), Err(Error::Shape(_))));
    }

    fn temporal_params(c: usize, seed: u64) -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = Rng::new(seed);
        let mut init = Init { store: &mut store, rng: &mut rng };
        init.layer_norm("blk.temporal.norm", c);
        init.attention("blk.temporal.attn", c, c, c, 1.0);
        store
    }

    #[test]
    fn temporal_zero_output_is_identity() {
        let mut p = temporal_params(8, 5);
        for s in ["weight", "bias"] {
            let name = format!("blk.temporal.attn.to_out.{s}");
            let z = p.get(&name).unwrap().map(|_| 0.0);
            p.insert(name, z);
        }
        let mut rng = Rng::new(6);
        let cur = rng.normal_tensor([3, 5, 8]);
        let mo = rng.normal_tensor([2, 5, 8]);
        let out = temporal_attention(&p, "blk", 2, &cur, Some(&mo)).unwrap();
        assert!(out.bit_eq(&cur));
    }

    /// Straight-line oracle: per token position, normalize every frame,
    /// project, attend over all `M + F` frames, add back to the current ones.
    fn temporal_oracle(p: &ParamStore, heads: usize, cur: &Tensor, mo: Option<&Tensor>) -> Tensor {
        let (f, n, c) = (cur.shape()[0], cur.shape()[1], cur.shape()[2]);
        let m = mo.map_or(0, |t| t.shape()[0]);
        let g = |s: &str| p.get(&format!("blk.temporal.{s}")).unwrap();
        let mut out = cur.clone();
        for pos in 0..n {
            let mut rows = Vec::new();
            for j in 0..m {
                rows.push(mo.unwrap().index_axis0(j).unwrap().row(pos).to_vec());
            }
            for j in 0..f {
                rows.push(cur.index_axis0(j).unwrap().row(pos).to_vec());
            }
            let seq = Tensor::from_rows(&rows).unwrap();
            let normed = ops::layer_norm(&seq, g("norm.gamma"), g("norm.beta"), LAYER_NORM_EPS).unwrap();
            let lin = |x: &Tensor, s: &str| ops::linear(x, g(&format!("attn.{s}.weight")), Some(g(&format!("attn.{s}.bias")))).unwrap();
            let q = lin(&normed.slice0(m, m + f).unwrap(), "to_q");
            let (k, v) = (lin(&normed, "to_k"), lin(&normed, "to_v"));
            let a = attention(&q, &k, &v, heads).unwrap();
            let inc = lin(&a, "to_out");
            for fi in 0..f {
                for ch in 0..c {
                    let idx = (fi * n + pos) * c + ch;
                    out.data_mut()[idx] += inc.at(&[fi, ch]);
                }
            }
        }
        out
    }

    #[test]
    fn temporal_matches_oracle_with_and_without_motion() {
        let p = temporal_params(8, 7);
        let mut rng = Rng::new(8);
        let cur = rng.normal_tensor([12, 3, 8]);
        let mo = rng.normal_tensor([4, 3, 8]);
        let got = temporal_attention(&p, "blk", 2, &cur, Some(&mo)).unwrap();
        assert!(got.max_abs_diff(&temporal_oracle(&p, 2, &cur, Some(&mo))) < 1e-10);
        let plain = temporal_attention(&p, "blk", 2, &cur, None).unwrap();
        assert!(plain.max_abs_diff(&temporal_oracle(&p, 2, &cur, None)) < 1e-10);
        // every one of the 4 motion frames is a key
        for j in 0..4 {
            let mut m2 = mo.clone();
            m2.data_mut()[j * 24] += 1.0;
            let moved = temporal_attention(&p, "blk", 2, &cur, Some(&m2)).unwrap();
            assert!(moved.max_abs_diff(&got) > 0.0, "motion frame {j} ignored");
        }
        let bad = rng.normal_tensor([4, 2, 8]);
        assert!(matches!(temporal_attention(&p, "blk", 2, &cur, Some(&bad)), Err(Error::Shape(_))));
    }

    #[test]
    fn temporal_keeps_identical_frames_identical() {
        let p = temporal_params(8, 9);
        let frame = Rng::new(10).normal_tensor([1, 6, 8]);
        let cur = Tensor::concat0(&vec![frame.clone(); 5]).unwrap();
        let mo = Tensor::concat0(&vec![frame; 2]).unwrap();
        let out = temporal_attention(&p, "blk", 2, &cur, Some(&mo)).unwrap();
        let first = out.index_axis0(0).unwrap();
        for f in 1..5 {
            assert!(out.index_axis0(f).unwrap().bit_eq(&first));
        }
    }

    fn conditioning_parts(m: &Denoiser, frames: usize, seed: u64) -> (Tensor, ReferenceFeatures, ReferenceFeatures, Tensor, RegionMaskSet) {
        let cfg = &m.config;
        let mut rng = Rng::new(seed);
        let x = rng.normal_tensor([frames, cfg.channels, cfg.height, cfg.width]);
        let r = m.extract_reference_features(&rng.normal_tensor(cfg.frame_shape())).unwrap();
        let mo = m
            .frame_features(&rng.normal_tensor([cfg.motion_frames, cfg.channels, cfg.height, cfg.width]))
            .unwrap();
        let audio = rng.normal_tensor([frames, cfg.audio_context, cfg.audio_channels]);
        (x, r, mo, audio, masks(cfg, seed + 1))
    }

    #[test]
    fn noise_prediction_shapes_and_scale_zero_audio_independence() {
        let m = Denoiser::init(ModelConfig::tiny(), 11).unwrap();
        let (x, r, mo, audio, masks) = conditioning_parts(&m, 2, 12);
        let mut cond = StepConditioning {
            reference: &r,
            motion: Some(&mo),
            temporal: true,
            audio: &audio,
            masks: &masks,
            scales: RegionScales::uniform(0.0),
        };
        let e = m.predict_noise(&x, 3, &cond).unwrap();
        assert_eq!(e.shape(), x.shape());
        assert!(e.all_finite());
        let other = audio.map(|v| -2.0 * v + 1.0);
        cond.audio = &other;
        assert!(m.predict_noise(&x, 3, &cond).unwrap().bit_eq(&e));
        cond.scales = RegionScales::default();
        assert!(m.predict_noise(&x, 3, &cond).unwrap().max_abs_diff(&e) > 0.0);
        assert!(matches!(m.predict_noise(&x, 10, &cond), Err(Error::Domain(_))));
    }

    #[test]
    fn mouth_scale_only_moves_mouth_weighted_output() {
        let m = Denoiser::init(ModelConfig::tiny(), 13).unwrap();
        let (x, r, mo, audio, masks) = conditioning_parts(&m, 2, 14);
        let cond = |scales| StepConditioning {
            reference: &r,
            motion: Some(&mo),
            temporal: true,
            audio: &audio,
            masks: &masks,
            scales,
        };
        let base = m.predict_noise(&x, 2, &cond(RegionScales::uniform(0.0))).unwrap();
        let mouth = RegionScales { mouth: 1.0, ..RegionScales::uniform(0.0) };
        assert!(m.predict_noise(&x, 2, &cond(mouth)).unwrap().max_abs_diff(&base) > 0.0);
        assert_eq!(Region::ALL.len(), 3);
    }

    #[test]
    fn from_params_checks_shapes() {
        let cfg = ModelConfig::tiny();
        let m = Denoiser::init(cfg.clone(), 1).unwrap();
        Denoiser::from_params(cfg.clone(), m.params.clone()).unwrap();
        let other = ModelConfig { model_width: 16, ..cfg };
        assert!(Denoiser::from_params(other, m.params).is_err());
    }
}
