//! Speech-encoder feature post-processing.
//!
//! Multi-layer encoder features `L × f × c_audio` are averaged over layers,
//! resampled to the video frame rate, projected by a small MLP into the
//! denoiser width, and cut into one centered window of `l` frames per video
//! frame.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Error, Result};
use crate::numerics::{lltf, ops, ParamStore, Tensor};

/// Per-layer encoder output for one clip.
#[derive(Clone, Debug)]
pub struct AudioClipFeatures {
    /// `L × f × c_audio`
    pub values: Tensor,
    /// Feature frames per second.
    pub source_rate: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub source_rate: f64,
}

impl AudioClipFeatures {
    pub fn new(values: Tensor, source_rate: f64) -> Result<Self> {
        if values.rank() != 3 {
            return Err(shape_err!(
                "audio features must be rank 3 (L, f, c), got {:?}",
                values.shape()
            ));
        }
        if !(source_rate > 0.0) || !source_rate.is_finite() {
            return Err(config_err!("source_rate must be positive, got {source_rate}"));
        }
        if !values.all_finite() {
            return Err(Error::Input("audio features contain non-finite values".into()));
        }
        Ok(Self { values, source_rate })
    }

    pub fn layers(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[2]
    }

    /// Loads `path` (rank-3 LLTF) and its JSON sidecar, which sits next to it
    /// with the extension replaced by `.json`.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let values = lltf::read_rank(path, 3)?;
        let side = path.with_extension("json");
        let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
        let sidecar: FeatureSidecar = serde_json::from_str(&text)?;
        Self::new(values, sidecar.source_rate)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        lltf::write(path, &self.values)?;
        let side = path.with_extension("json");
        let body = crate::json::to_pretty_sorted(&FeatureSidecar {
            source_rate: self.source_rate,
        })?;
        fs::write(&side, body).map_err(|e| Error::io(&side, e))
    }
}

/// Per-frame audio context windows, `b × F × l × c`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioBlocks {
    pub values: Tensor,
}

impl AudioBlocks {
    pub fn new(values: Tensor) -> Result<Self> {
        match values.shape() {
            [_, _, l, _] if l % 2 == 1 => Ok(Self { values }),
            [_, _, l, _] => Err(config_err!("audio context length {l} must be odd")),
            s => Err(shape_err!("audio blocks must be rank 4 (b, F, l, c), got {s:?}")),
        }
    }

    pub fn batch(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn context(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn channels(&self) -> usize {
        self.values.shape()[3]
    }

    /// The `l × c` block of video frame `frame` in batch item `item`.
    pub fn block(&self, item: usize, frame: usize) -> Result<Tensor> {
        self.values.index_axis0(item)?.index_axis0(frame)
    }

    /// Blocks of frames `start..end` of batch item `item`, as `(end−start) × l × c`.
    pub fn frame_range(&self, item: usize, start: usize, end: usize) -> Result<Tensor> {
        self.values.index_axis0(item)?.slice0(start, end)
    }
}

/// Mean over the layer axis: `L × f × c → f × c`.
pub fn average_layers(feats: &AudioClipFeatures) -> Result<Tensor> {
    if feats.values.is_empty() || feats.layers() == 0 {
        return Err(Error::EmptyInput("no encoder layers".into()));
    }
    ops::mean_axis0(&feats.values)
}

/// Linear-interpolation resampling along time from `source_rate` to
/// `target_fps`; the output has `round(f · target_fps / source_rate)` frames,
/// at least one.
///
/// Output frame `j` sits at time `j / target_fps` and reads the source at
/// fractional index `j · source_rate / target_fps`, clamped to the last frame.
pub fn align_to_video_fps(x: &Tensor, source_rate: f64, target_fps: f64) -> Result<Tensor> {
    let (f, c) = x
        .dims2()
        .map_err(|_| shape_err!("expected f × c features, got {:?}", x.shape()))?;
    if f == 0 {
        return Err(Error::EmptyInput("no audio frames".into()));
    }
    if !(source_rate > 0.0 && target_fps > 0.0) {
        return Err(config_err!("rates must be positive"));
    }
    if source_rate == target_fps {
        return Ok(x.clone());
    }
    let ratio = source_rate / target_fps;
    let out_frames = ((f as f64 / ratio).round() as usize).max(1);
    let mut data = Vec::with_capacity(out_frames * c);
    for j in 0..out_frames {
        let pos = (j as f64 * ratio).min((f - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(f - 1);
        let w = pos - i0 as f64;
        let (r0, r1) = (x.row(i0), x.row(i1));
        data.extend(r0.iter().zip(r1).map(|(a, b)| {
            if w == 0.0 {
                *a
            } else {
                a + w * (b - a)
            }
        }));
    }
    Tensor::with_dtype(x.dtype(), [out_frames, c], data)
}

/// Video frame rate the fixtures and CLI assume unless told otherwise.
pub const DEFAULT_VIDEO_FPS: f64 = 25.0;

/// Layer average, resampling to `fps`, then blocking into `l`-frame
/// windows over the first `frames` video frames (all when `None`).
pub fn prepare_audio(feats: &AudioClipFeatures, fps: f64, l: usize, frames: Option<usize>) -> Result<AudioBlocks> {
    let avg = average_layers(feats)?;
    let aligned = align_to_video_fps(&avg, feats.source_rate, fps)?;
    block_audio_features(&aligned, l, frames)
}

/// Parameter names of the audio projection MLP under `prefix`.
pub struct AudioMlpNames {
    pub w1: String,
    pub b1: String,
    pub w2: String,
    pub b2: String,
}

impl AudioMlpNames {
    pub fn new(prefix: &str) -> Self {
        Self {
            w1: format!("{prefix}.fc1.weight"),
            b1: format!("{prefix}.fc1.bias"),
            w2: format!("{prefix}.fc2.weight"),
            b2: format!("{prefix}.fc2.bias"),
        }
    }
}

/// Weights of the two-layer projection `x ↦ W₂·SiLU(W₁x + b₁) + b₂`, stored
/// `in × out`.
#[derive(Clone, Debug)]
pub struct AudioMlp {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl AudioMlp {
    pub fn from_params(params: &ParamStore, prefix: &str) -> Result<Self> {
        let n = AudioMlpNames::new(prefix);
        Ok(Self {
            w1: params.require(&n.w1)?.clone(),
            b1: params.require(&n.b1)?.clone(),
            w2: params.require(&n.w2)?.clone(),
            b2: params.require(&n.b2)?.clone(),
        })
    }

    pub fn input_width(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn output_width(&self) -> usize {
        self.w2.shape()[1]
    }
}

/// Applies the projection MLP to every frame.
pub fn project_audio(x: &Tensor, mlp: &AudioMlp) -> Result<Tensor> {
    let (_, c) = x.rows_cols();
    if c != mlp.input_width() {
        return Err(shape_err!(
            "audio width {c} does not match MLP input width {}",
            mlp.input_width()
        ));
    }
    let h = ops::silu(&ops::linear(x, &mlp.w1, Some(&mlp.b1))?);
    ops::linear(&h, &mlp.w2, Some(&mlp.b2))
}

/// Source frame feeding position `j` of the block for video frame `i`.
#[inline]
pub fn window_index(i: usize, j: usize, l: usize, f: usize) -> usize {
    let off = i as isize + j as isize - (l as isize - 1) / 2;
    off.clamp(0, f as isize - 1) as usize
}

/// Row indices (into the `f` source frames) of the blocks for frames
/// `frames`, flattened frame-major.
pub fn window_indices(frames: impl IntoIterator<Item = usize>, l: usize, f: usize) -> Vec<usize> {
    frames
        .into_iter()
        .flat_map(|i| (0..l).map(move |j| window_index(i, j, l, f)))
        .collect()
}

/// Cuts `b × f × c` (or `f × c`, treated as `b = 1`) features into
/// `b × F × l × c` blocks. Block `i` holds source frames `i−l/2 ..= i+l/2`,
/// with indices clamped into range so edge frames repeat.
pub fn block_audio_features(x: &Tensor, l: usize, frames: Option<usize>) -> Result<AudioBlocks> {
    let x3 = match x.rank() {
        2 => x.reshape([1, x.shape()[0], x.shape()[1]])?,
        3 => x.clone(),
        _ => return Err(shape_err!("expected (b, f, c) features, got {:?}", x.shape())),
    };
    let (b, f, c) = (x3.shape()[0], x3.shape()[1], x3.shape()[2]);
    if l % 2 == 0 {
        return Err(config_err!("audio context length {l} must be odd"));
    }
    let big_f = frames.unwrap_or(f);
    if big_f > f || big_f == 0 {
        return Err(config_err!("block count {big_f} must be in 1..={f}"));
    }
    let idx = window_indices(0..big_f, l, f);
    let mut data = Vec::with_capacity(b * big_f * l * c);
    for item in 0..b {
        let base = item * f;
        for &src in &idx {
            data.extend_from_slice(x3.row(base + src));
        }
    }
    AudioBlocks::new(Tensor::with_dtype(x.dtype(), [b, big_f, l, c], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{DType, Rng};
    use proptest::prelude::*;

    fn feats(values: Tensor) -> AudioClipFeatures {
        AudioClipFeatures::new(values, 50.0).unwrap()
    }

    #[test]
    fn average_of_one_and_two_layers() {
        let one = Tensor::from_fn([1, 3, 2], |i| i as f64);
        assert!(average_layers(&feats(one.clone()))
            .unwrap()
            .bit_eq(&one.reshape([3, 2]).unwrap()));
        let two = Tensor::new([2, 1, 1], vec![2.0, 4.0]).unwrap();
        assert_eq!(average_layers(&feats(two)).unwrap().data(), &[3.0]);
    }

    #[test]
    fn average_matches_elementwise_oracle() {
        let mut rng = Rng::new(11);
        let v = rng.normal_tensor([4, 7, 16]);
        let got = average_layers(&feats(v.clone())).unwrap();
        for t in 0..7 {
            for c in 0..16 {
                let want = (0..4).map(|l| v.at(&[l, t, c])).sum::<f64>() / 4.0;
                assert!((got.at(&[t, c]) - want).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn resampling_cases() {
        let mut rng = Rng::new(3);
        let x = rng.normal_tensor([9, 3]);
        assert!(align_to_video_fps(&x, 25.0, 25.0).unwrap().bit_eq(&x));

        let k = Tensor::full([7, 2], 0.375);
        for (s, t) in [(50.0, 25.0), (16.0, 25.0), (49.0, 30.0)] {
            assert!(align_to_video_fps(&k, s, t).unwrap().data().iter().all(|&v| v == 0.375));
        }

        // 10 frames at 50/s to 25 fps: frame j reads source 2j exactly.
        let x = Tensor::from_fn([10, 1], |i| (i * i) as f64);
        let y = align_to_video_fps(&x, 50.0, 25.0).unwrap();
        assert_eq!(y.data(), &[0.0, 4.0, 16.0, 36.0, 64.0]);

        // Upsampling 4 frames at 10/s to 25 fps: 10 frames at 0.4 spacing.
        let x = Tensor::new([4, 1], vec![0.0, 1.0, 3.0, 7.0]).unwrap();
        let y = align_to_video_fps(&x, 10.0, 25.0).unwrap();
        let want = [0.0, 0.4, 0.8, 1.4, 2.2, 3.0, 4.6, 6.2, 7.0, 7.0];
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{:?}", y.data());
        }
    }

    #[test]
    fn resampling_rejects_bad_input() {
        assert!(align_to_video_fps(&Tensor::zeros([3, 2]), 0.0, 25.0).is_err());
        assert!(align_to_video_fps(&Tensor::zeros([3]), 50.0, 25.0).is_err());
    }

    fn mlp(w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> AudioMlp {
        AudioMlp { w1, b1, w2, b2 }
    }

    #[test]
    fn projection_zero_and_identity() {
        let mut rng = Rng::new(8);
        let x = rng.normal_tensor([4, 8]);
        let z = mlp(Tensor::zeros([8, 8]), Tensor::zeros([8]), Tensor::zeros([8, 6]), Tensor::zeros([6]));
        assert!(project_audio(&x, &z).unwrap().data().iter().all(|&v| v == 0.0));

        let eye = Tensor::from_fn([8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
        let id = mlp(eye.clone(), Tensor::zeros([8]), eye, Tensor::zeros([8]));
        let y = project_audio(&x, &id).unwrap();
        let want = x.map(|v| v / (1.0 + (-v).exp()));
        assert!(y.max_abs_diff(&want) < 1e-6);

        let bad = mlp(Tensor::zeros([5, 8]), Tensor::zeros([8]), Tensor::zeros([8, 8]), Tensor::zeros([8]));
        assert!(matches!(project_audio(&x, &bad), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_matches_matmul_oracle() {
        let mut rng = Rng::new(21);
        let x = rng.normal_tensor([4, 8]);
        let m = mlp(
            rng.normal_tensor([8, 5]),
            rng.normal_tensor([5]),
            rng.normal_tensor([5, 3]),
            rng.normal_tensor([3]),
        );
        let y = project_audio(&x, &m).unwrap();
        for r in 0..4 {
            let h: Vec<f64> = (0..5)
                .map(|j| {
                    let z = (0..8).map(|i| x.at(&[r, i]) * m.w1.at(&[i, j])).sum::<f64>() + m.b1.data()[j];
                    z / (1.0 + (-z).exp())
                })
                .collect();
            for k in 0..3 {
                let want = (0..5).map(|j| h[j] * m.w2.at(&[j, k])).sum::<f64>() + m.b2.data()[k];
                assert!((y.at(&[r, k]) - want).abs() < 1e-6);
            }
        }
    }

    /// Source frame index encoded as the value of channel 0.
    fn indexed(f: usize, c: usize) -> Tensor {
        Tensor::from_fn([1, f, c], |i| ((i / c) * 1000 + i % c) as f64)
    }

    fn sources(blocks: &AudioBlocks, frame: usize) -> Vec<usize> {
        let b = blocks.block(0, frame).unwrap();
        (0..blocks.context()).map(|j| (b.at(&[j, 0]) / 1000.0) as usize).collect()
    }

    #[test]
    fn blocking_clamps_edges() {
        let x = indexed(12, 768).to_dtype(DType::F32);
        let b = block_audio_features(&x, 5, None).unwrap();
        assert_eq!(b.values.shape(), &[1, 12, 5, 768]);
        assert_eq!(sources(&b, 0), [0, 0, 0, 1, 2]);
        assert_eq!(sources(&b, 6), [4, 5, 6, 7, 8]);
        assert_eq!(sources(&b, 11), [9, 10, 11, 11, 11]);

        let b1 = block_audio_features(&x, 1, None).unwrap();
        for i in 0..12 {
            assert_eq!(b1.block(0, i).unwrap().data(), x.row(i));
        }
    }

    #[test]
    fn blocking_config_errors() {
        let x = indexed(6, 2);
        assert!(matches!(block_audio_features(&x, 4, None), Err(Error::Config(_))));
        assert!(matches!(block_audio_features(&x, 3, Some(7)), Err(Error::Config(_))));
        assert_eq!(block_audio_features(&x, 3, Some(4)).unwrap().frames(), 4);
    }

    proptest! {
        #[test]
        fn blocks_are_exact_copies(f in 1usize..20, half in 0usize..4, b in 1usize..3) {
            let l = 2 * half + 1;
            let c = 3;
            let x = Tensor::from_fn([b, f, c], |i| i as f64 * 0.5 - 7.0);
            let blocks = block_audio_features(&x, l, None).unwrap();
            for item in 0..b {
                for i in 0..f {
                    let blk = blocks.block(item, i).unwrap();
                    for j in 0..l {
                        let src = (i as isize + j as isize - half as isize).clamp(0, f as isize - 1) as usize;
                        let want = x.index_axis0(item).unwrap();
                        prop_assert_eq!(blk.row(j), want.row(src));
                    }
                    if i >= half && i + half < f {
                        let want = x.index_axis0(item).unwrap().slice0(i - half, i + half + 1).unwrap();
                        prop_assert_eq!(blk.data(), want.data());
                    }
                }
            }
        }

        #[test]
        fn averaging_ignores_layer_order(seed in any::<u64>(), layers in 1usize..5) {
            let mut rng = Rng::new(seed);
            let v = rng.normal_tensor([layers, 3, 2]);
            let mut perm: Vec<Tensor> = (0..layers).map(|i| v.index_axis0(i).unwrap()).collect();
            perm.reverse();
            let a = average_layers(&feats(v)).unwrap();
            let b = average_layers(&feats(Tensor::stack(&perm).unwrap())).unwrap();
            prop_assert!(a.max_abs_diff(&b) < 1e-12);
        }

        #[test]
        fn resampling_stays_within_channel_bounds(seed in any::<u64>(), f in 1usize..30, src in 10.0f64..100.0, dst in 10.0f64..60.0) {
            let mut rng = Rng::new(seed);
            let x = rng.normal_tensor([f, 2]);
            let y = align_to_video_fps(&x, src, dst).unwrap();
            prop_assert_eq!(y.shape()[0], ((f as f64 * dst / src).round() as usize).max(1));
            for c in 0..2 {
                let col: Vec<f64> = (0..f).map(|i| x.at(&[i, c])).collect();
                let lo = col.iter().cloned().fold(f64::MAX, f64::min);
                let hi = col.iter().cloned().fold(f64::MIN, f64::max);
                for j in 0..y.shape()[0] {
                    let v = y.at(&[j, c]);
                    prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
                }
            }
        }
    }
}
