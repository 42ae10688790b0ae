//! Dual cross-attention with region-specific gates.
//!
//! One fusion block turns visual tokens into
//!
//! ```text
//! hidden_states_ref   = hidden_states + CrossAttn(hidden_states, ref_features)
//! hidden_states_audio = CrossAttn(hidden_states_ref, audio_block)
//! gate_states         = AdaLN(Linear(hidden_states_audio), timestep)
//! RegionGate_r        = mask_r + tanh(Linear_r(gate_states)) · SiLU(alpha_r)
//! out                 = hidden_states_ref + Σ_r RegionGate_r · scale_r · hidden_states_audio
//! ```
//!
//! for the regions head, mouth and eyes. The reference cross-attention keeps
//! its residual; the audio cross-attention does not, because its output is
//! consumed as a gated increment. Regional contributions are summed, so
//! overlapping regions accumulate.
//!
//! Everything is built on the gradient tape ([`Graph`]); the tensor-level
//! functions run the same graph code with frozen parameters.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::nn::{Graph, Init};
use crate::numerics::{lltf, timestep_embedding, ParamStore, Rng, Tensor, Var};

/// Facial region driven by its own gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Region {
    Head,
    Mouth,
    Eyes,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Head, Region::Mouth, Region::Eyes];

    pub fn name(self) -> &'static str {
        match self {
            Region::Head => "head",
            Region::Mouth => "mouth",
            Region::Eyes => "eyes",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Soft `[0, 1]` masks for the three regions, all `H × W`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegionMaskSet {
    masks: [Tensor; 3],
}

fn validate_mask(region: Region, m: &Tensor) -> Result<()> {
    if m.rank() != 2 {
        return Err(shape_err!("{} mask must be rank 2, got {:?}", region.name(), m.shape()));
    }
    if let Some(v) = m.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Input(format!(
            "{} mask value {v} outside [0, 1]",
            region.name()
        )));
    }
    Ok(())
}

impl RegionMaskSet {
    pub fn new(head: Tensor, mouth: Tensor, eyes: Tensor) -> Result<Self> {
        let masks = [head, mouth, eyes];
        for (r, m) in Region::ALL.iter().zip(&masks) {
            validate_mask(*r, m)?;
        }
        if masks.iter().any(|m| m.shape() != masks[0].shape()) {
            return Err(shape_err!("region masks must share one shape"));
        }
        Ok(Self { masks })
    }

    pub fn get(&self, r: Region) -> &Tensor {
        &self.masks[r.index()]
    }

    /// `(H, W)`.
    pub fn dims(&self) -> (usize, usize) {
        let s = self.masks[0].shape();
        (s[0], s[1])
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.dims();
        h * w
    }

    /// Reads `head.lltf`, `mouth.lltf` and `eyes.lltf` from `dir`.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |r: Region| lltf::read_rank(dir.join(format!("{}.lltf", r.name())), 2);
        Self::new(read(Region::Head)?, read(Region::Mouth)?, read(Region::Eyes)?)
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for r in Region::ALL {
            lltf::write(dir.join(format!("{}.lltf", r.name())), self.get(r))?;
        }
        Ok(())
    }

    /// Grows one region by `steps` rounds of 3×3 max filtering.
    pub fn dilate(&self, region: Region, steps: usize) -> RegionMaskSet {
        let mut out = self.clone();
        let (h, w) = self.dims();
        for _ in 0..steps {
            let m = &out.masks[region.index()];
            let grown = Tensor::from_fn([h, w], |i| {
                let (y, x) = (i / w, i % w);
                let mut best = 0.0f64;
                for yy in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for xx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        best = best.max(m.at(&[yy, xx]));
                    }
                }
                best
            })
            .to_dtype(m.dtype());
            out.masks[region.index()] = grown;
        }
        out
    }

    /// Region mask flattened to `n × 1` and repeated for `frames` frames.
    pub fn tiled(&self, r: Region, frames: usize) -> Tensor {
        let m = self.get(r);
        let n = m.len();
        Tensor::from_fn([frames * n, 1], |i| m.data()[i % n])
    }
}

/// Area-average pooling of every region mask to `h × w`.
pub fn prepare_region_masks(masks: &RegionMaskSet, h: usize, w: usize) -> Result<RegionMaskSet> {
    let (h0, w0) = masks.dims();
    if h == 0 || w == 0 || h > h0 || w > w0 || h0 % h != 0 || w0 % w != 0 {
        return Err(config_err!("cannot pool {h0}×{w0} masks to {h}×{w}"));
    }
    let (fy, fx) = (h0 / h, w0 / w);
    let area = (fy * fx) as f64;
    let pool = |m: &Tensor| {
        let data = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let mut s = 0.0;
                for dy in 0..fy {
                    for dx in 0..fx {
                        s += m.at(&[y * fy + dy, x * fx + dx]);
                    }
                }
                (s / area).clamp(0.0, 1.0)
            })
            .collect();
        Tensor::with_dtype(m.dtype(), [h, w], data)
    };
    RegionMaskSet::new(
        pool(masks.get(Region::Head))?,
        pool(masks.get(Region::Mouth))?,
        pool(masks.get(Region::Eyes))?,
    )
}

/// Non-learned per-region inference weights.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionScales {
    pub head: f64,
    pub mouth: f64,
    pub eyes: f64,
}

impl Default for RegionScales {
    fn default() -> Self {
        Self::uniform(1.0)
    }
}

impl RegionScales {
    pub fn uniform(v: f64) -> Self {
        Self {
            head: v,
            mouth: v,
            eyes: v,
        }
    }

    pub fn get(&self, r: Region) -> f64 {
        match r {
            Region::Head => self.head,
            Region::Mouth => self.mouth,
            Region::Eyes => self.eyes,
        }
    }

    pub fn all_zero(&self) -> bool {
        Region::ALL.iter().all(|&r| self.get(r) == 0.0)
    }
}

/// Widths of one fusion block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FusionConfig {
    /// Token width `c`.
    pub width: usize,
    /// Audio token width fed to the audio cross-attention.
    pub audio_width: usize,
    /// Width of `gate_states`.
    pub gate_width: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    /// Number of diffusion timesteps; valid timesteps are `0..timesteps`.
    pub timesteps: usize,
}

impl FusionConfig {
    pub fn new(width: usize, heads: usize, timesteps: usize) -> Self {
        Self {
            width,
            audio_width: width,
            gate_width: width,
            heads,
            time_embed_dim: width,
            timesteps,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(config_err!("width {} not divisible by {} heads", self.width, self.heads));
        }
        if self.time_embed_dim % 2 != 0 || self.time_embed_dim == 0 {
            return Err(config_err!("time_embed_dim must be even"));
        }
        if self.gate_width == 0 || self.audio_width == 0 || self.timesteps == 0 {
            return Err(config_err!("fusion widths and timesteps must be positive"));
        }
        Ok(())
    }
}

/// Adds fresh parameters for a fusion block under `prefix`.
///
/// The AdaLN conditioning network and every `alpha_r` start at zero, so a
/// freshly initialized block gates purely by mask. The gate projections are
/// small but nonzero so that `alpha_r` receives gradient.
pub fn init_fusion_params(init: &mut Init<'_>, prefix: &str, cfg: &FusionConfig) {
    let c = cfg.width;
    init.layer_norm(&format!("{prefix}.ref_attn.norm"), c);
    init.attention(&format!("{prefix}.ref_attn"), c, c, c, 1.0);
    init.layer_norm(&format!("{prefix}.audio_attn.norm"), c);
    init.attention(&format!("{prefix}.audio_attn"), c, cfg.audio_width, c, 1.0);
    init.linear(&format!("{prefix}.gate_pre"), c, cfg.gate_width, 1.0);
    init.zeros_linear(&format!("{prefix}.adaln"), cfg.time_embed_dim, 2 * cfg.gate_width);
    for r in Region::ALL {
        let p = format!("{prefix}.gate.{}", r.name());
        init.linear(&p, cfg.gate_width, 1, 0.1);
        init.tensor(&format!("{p}.alpha"), Tensor::zeros([1]));
    }
}

/// Tape handles of the block's named intermediates.
#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub hidden_states_ref: Var,
    pub hidden_states_audio: Var,
    pub gate_states: Var,
    pub region_gates: [Var; 3],
    pub out: Var,
}

/// Reference cross-attention with residual: every frame's tokens
/// attend to the same reference tokens.
pub fn cross_attend_reference_var(
    g: &mut Graph,
    prefix: &str,
    heads: usize,
    hidden: Var,
    ref_features: Var,
    frames: usize,
) -> Result<Var> {
    let q = g.layer_norm(&format!("{prefix}.ref_attn.norm"), hidden)?;
    let inc = g.attend(&format!("{prefix}.ref_attn"), q, ref_features, frames, heads, true)?;
    Ok(g.tape.add(hidden, inc))
}

/// Audio cross-attention without residual: frame `i` attends to its own
/// block of `l` audio tokens (`audio` rows are `frames × l`).
pub fn cross_attend_audio_var(
    g: &mut Graph,
    prefix: &str,
    heads: usize,
    hidden_ref: Var,
    audio: Var,
    frames: usize,
) -> Result<Var> {
    let q = g.layer_norm(&format!("{prefix}.audio_attn.norm"), hidden_ref)?;
    g.attend(&format!("{prefix}.audio_attn"), q, audio, frames, heads, false)
}

/// `(1 + Δγ(t)) ⊙ LN(Linear(hidden_states_audio)) + β(t)` where
/// `[Δγ, β] = Linear(SiLU(temb(t)))`.
pub fn gate_states_var(
    g: &mut Graph,
    prefix: &str,
    cfg: &FusionConfig,
    hidden_audio: Var,
    timestep: usize,
) -> Result<Var> {
    if timestep >= cfg.timesteps {
        return Err(Error::Domain(format!(
            "timestep {timestep} outside 0..{}",
            cfg.timesteps
        )));
    }
    let pre = g.linear(&format!("{prefix}.gate_pre"), hidden_audio)?;
    let normed = g.tape.layer_norm(pre, crate::numerics::LAYER_NORM_EPS);
    let temb = timestep_embedding(timestep, cfg.time_embed_dim)?;
    let temb = g.constant(&temb.reshape([1, cfg.time_embed_dim])?);
    let act = g.tape.silu(temb);
    let cond = g.linear(&format!("{prefix}.adaln"), act)?;
    let dgamma = g.tape.slice_cols(cond, 0, cfg.gate_width);
    let beta = g.tape.slice_cols(cond, cfg.gate_width, 2 * cfg.gate_width);
    let modulated = g.tape.mul_row(normed, dgamma);
    let x = g.tape.add(normed, modulated);
    Ok(g.tape.add_row(x, beta))
}

/// `mask + tanh(Linear_r(gate_states)) · SiLU(alpha_r)`; `mask` is the
/// region's `rows × 1` token mask.
pub fn region_gate_var(
    g: &mut Graph,
    prefix: &str,
    region: Region,
    gate_states: Var,
    mask: &Tensor,
) -> Result<Var> {
    let p = format!("{prefix}.gate.{}", region.name());
    let rows = g.value(gate_states).rows_cols().0;
    if mask.len() != rows {
        return Err(shape_err!(
            "{} mask has {} tokens, gate states have {rows}",
            region.name(),
            mask.len()
        ));
    }
    let z = g.linear(&p, gate_states)?;
    let t = g.tape.tanh(z);
    let alpha = g.p(&format!("{p}.alpha"))?;
    let s = g.tape.silu(alpha);
    let offset = g.tape.mul_scalar(t, s);
    let m = g.constant(&mask.reshape([rows, 1])?);
    Ok(g.tape.add(m, offset))
}

/// `hidden_ref + Σ_r gate_r · scale_r · hidden_audio`. Regions with a zero
/// scale contribute nothing, exactly.
pub fn fuse_var(
    g: &mut Graph,
    hidden_ref: Var,
    hidden_audio: Var,
    gates: [Var; 3],
    scales: &RegionScales,
) -> Result<Var> {
    let (rr, rc) = g.value(hidden_ref).rows_cols();
    let (ar, ac) = g.value(hidden_audio).rows_cols();
    if (rr, rc) != (ar, ac) {
        return Err(shape_err!("fuse: ref {rr}×{rc} vs audio {ar}×{ac}"));
    }
    let mut out = hidden_ref;
    for r in Region::ALL {
        let s = scales.get(r);
        if s == 0.0 {
            continue;
        }
        let gate = gates[r.index()];
        if g.value(gate).len() != rr {
            return Err(shape_err!("fuse: {} gate has the wrong token count", r.name()));
        }
        let gated = g.tape.mul_col(hidden_audio, gate);
        let scaled = g.tape.scale(gated, s);
        out = g.tape.add(out, scaled);
    }
    Ok(out)
}

/// Whole fusion block on the tape.
///
/// `hidden` is `frames·n × c`, `ref_features` is `m × c` (shared by every
/// frame), `audio` is `frames·l × c_audio`, and `masks` are at token
/// resolution `n`.
#[allow(clippy::too_many_arguments)]
pub fn fusion_block_var(
    g: &mut Graph,
    prefix: &str,
    cfg: &FusionConfig,
    hidden: Var,
    ref_features: Var,
    audio: Var,
    frames: usize,
    masks: &RegionMaskSet,
    timestep: usize,
    scales: &RegionScales,
) -> Result<FusionVars> {
    let rows = g.value(hidden).rows_cols().0;
    if rows != frames * masks.tokens() {
        return Err(shape_err!(
            "{rows} hidden rows do not match {frames} frames of {} tokens",
            masks.tokens()
        ));
    }
    let hidden_states_ref = cross_attend_reference_var(g, prefix, cfg.heads, hidden, ref_features, frames)?;
    let hidden_states_audio = cross_attend_audio_var(g, prefix, cfg.heads, hidden_states_ref, audio, frames)?;
    let gate_states = gate_states_var(g, prefix, cfg, hidden_states_audio, timestep)?;
    let mut region_gates = [gate_states; 3];
    for r in Region::ALL {
        region_gates[r.index()] = region_gate_var(g, prefix, r, gate_states, &masks.tiled(r, frames))?;
    }
    let out = fuse_var(g, hidden_states_ref, hidden_states_audio, region_gates, scales)?;
    Ok(FusionVars {
        hidden_states_ref,
        hidden_states_audio,
        gate_states,
        region_gates,
        out,
    })
}

/// Materialized intermediates of one fusion forward pass.
#[derive(Clone, Debug)]
pub struct FusionActivations {
    pub hidden_states: Tensor,
    pub hidden_states_ref: Tensor,
    pub hidden_states_audio: Tensor,
    pub gate_states: Tensor,
    /// Indexed like [`Region::ALL`]; each `n × 1`.
    pub region_gates: [Tensor; 3],
    pub out: Tensor,
}

impl FusionActivations {
    pub fn region_gate(&self, r: Region) -> &Tensor {
        &self.region_gates[r.index()]
    }
}

/// A fusion block with its own parameters, for single-frame tensor-level use.
#[derive(Clone, Debug)]
pub struct FusionBlock {
    pub params: ParamStore,
    pub prefix: String,
    pub config: FusionConfig,
}

impl FusionBlock {
    pub fn init(config: FusionConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        init_fusion_params(&mut Init { store: &mut params, rng }, "fusion", &config);
        Ok(Self {
            params,
            prefix: "fusion".into(),
            config,
        })
    }

    pub fn param_mut(&mut self, suffix: &str) -> &mut Tensor {
        let name = format!("{}.{suffix}", self.prefix);
        self.params
            .get_mut(&name)
            .unwrap_or_else(|| panic!("no parameter {name}"))
    }

    fn check_width(&self, t: &Tensor, want: usize, what: &str) -> Result<()> {
        match t.dims2() {
            Ok((_, c)) if c == want => Ok(()),
            _ => Err(shape_err!("{what} must be rows × {want}, got {:?}", t.shape())),
        }
    }

    pub fn cross_attend_reference(&self, hidden: &Tensor, ref_features: &Tensor) -> Result<Tensor> {
        self.check_width(hidden, self.config.width, "hidden_states")?;
        self.check_width(ref_features, self.config.width, "ref_features")?;
        let mut g = Graph::frozen(&self.params);
        let (h, r) = (g.constant(hidden), g.constant(ref_features));
        let v = cross_attend_reference_var(&mut g, &self.prefix, self.config.heads, h, r, 1)?;
        Ok(g.value(v).to_dtype(hidden.dtype()))
    }

    pub fn cross_attend_audio(&self, hidden_ref: &Tensor, audio_block: &Tensor) -> Result<Tensor> {
        self.check_width(hidden_ref, self.config.width, "hidden_states_ref")?;
        self.check_width(audio_block, self.config.audio_width, "audio block")?;
        let mut g = Graph::frozen(&self.params);
        let (h, a) = (g.constant(hidden_ref), g.constant(audio_block));
        let v = cross_attend_audio_var(&mut g, &self.prefix, self.config.heads, h, a, 1)?;
        Ok(g.value(v).to_dtype(hidden_ref.dtype()))
    }

    pub fn compute_gate_states(&self, hidden_audio: &Tensor, timestep: usize) -> Result<Tensor> {
        self.check_width(hidden_audio, self.config.width, "hidden_states_audio")?;
        let mut g = Graph::frozen(&self.params);
        let a = g.constant(hidden_audio);
        let v = gate_states_var(&mut g, &self.prefix, &self.config, a, timestep)?;
        Ok(g.value(v).to_dtype(hidden_audio.dtype()))
    }

    /// `masks` must already be at token resolution.
    pub fn compute_region_gate(&self, gate_states: &Tensor, region: Region, masks: &RegionMaskSet) -> Result<Tensor> {
        self.check_width(gate_states, self.config.gate_width, "gate_states")?;
        let mut g = Graph::frozen(&self.params);
        let s = g.constant(gate_states);
        let v = region_gate_var(&mut g, &self.prefix, region, s, &masks.tiled(region, 1))?;
        Ok(g.value(v).to_dtype(gate_states.dtype()))
    }

    /// Single-frame forward with every intermediate retained.
    pub fn forward(
        &self,
        hidden: &Tensor,
        ref_features: &Tensor,
        audio_block: &Tensor,
        masks: &RegionMaskSet,
        timestep: usize,
        scales: &RegionScales,
    ) -> Result<FusionActivations> {
        self.check_width(hidden, self.config.width, "hidden_states")?;
        self.check_width(ref_features, self.config.width, "ref_features")?;
        self.check_width(audio_block, self.config.audio_width, "audio block")?;
        let dt = hidden.dtype();
        let mut g = Graph::frozen(&self.params);
        let (h, r, a) = (g.constant(hidden), g.constant(ref_features), g.constant(audio_block));
        let v = fusion_block_var(&mut g, &self.prefix, &self.config, h, r, a, 1, masks, timestep, scales)?;
        let get = |x: Var| g.value(x).to_dtype(dt);
        Ok(FusionActivations {
            hidden_states: hidden.clone(),
            hidden_states_ref: get(v.hidden_states_ref),
            hidden_states_audio: get(v.hidden_states_audio),
            gate_states: get(v.gate_states),
            region_gates: v.region_gates.map(get),
            out: get(v.out),
        })
    }
}

/// Tensor-level fuse over precomputed activations and gates.
pub fn fuse(
    hidden_ref: &Tensor,
    hidden_audio: &Tensor,
    gates: &[Tensor; 3],
    scales: &RegionScales,
) -> Result<Tensor> {
    let empty = ParamStore::new();
    let mut g = Graph::frozen(&empty);
    let r = g.constant(hidden_ref);
    let a = g.constant(hidden_audio);
    let gv = [0, 1, 2].map(|i| g.constant(&gates[i]));
    let out = fuse_var(&mut g, r, a, gv, scales)?;
    Ok(g.value(out).to_dtype(hidden_ref.dtype()))
}
