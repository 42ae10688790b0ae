//! Deterministic synthetic datasets on disk.
//!
//! [`make_fixtures`] writes everything the CLI subcommands consume:
//!
//! ```text
//! model.json                    toy ModelConfig
//! clips/clip_NNN/               training clips (see trainer::load_clip)
//! checkpoint/                   freshly initialized parameters
//! train.json                    stage-2 TrainConfig over clips/
//! curation/clips.jsonl          planted curation corpus
//! curation/thresholds.json
//! curation/manifest.json        expected survivors and rejection stages
//! eval/real.lltf, eval/fake.lltf            feature sets for frechet
//! eval/video.lltf, eval/audio.lltf (+ .json) embedding streams for sync
//! fixtures.json                 index of the above
//! ```
//!
//! Masks are stored at twice the latent resolution and audio features at
//! twice the video frame rate, so loading exercises pooling and alignment.

use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::audio::{AudioClipFeatures, DEFAULT_VIDEO_FPS};
use crate::curation::{planted_corpus, write_jsonl};
use crate::denoiser::{Denoiser, ModelConfig};
use crate::error::{Error, Result};
use crate::fusion::{Region, RegionMaskSet};
use crate::json::to_pretty_sorted;
use crate::metrics::EmbeddingStream;
use crate::numerics::{lltf, Rng, Tensor};
use crate::trainer::{save_clip, synthetic_clip, TrainConfig};

pub const FIXTURE_CLIPS: usize = 2;
pub const FIXTURE_FRAMES: usize = 8;
pub const FIXTURE_AUDIO_RATE: f64 = 2.0 * DEFAULT_VIDEO_FPS;
pub const FIXTURE_CORPUS: usize = 200;
/// Audio stream of the sync fixture lags video by this many frames.
pub const FIXTURE_SYNC_OFFSET: i64 = 3;

/// Contents of `fixtures.json`.
#[derive(Clone, Debug, Serialize)]
pub struct FixtureIndex {
    pub seed: u64,
    pub fps: f64,
    pub model: ModelConfig,
    pub clips: Vec<String>,
    pub sync_offset: i64,
    /// Every written file, relative to the fixture root, sorted.
    pub files: Vec<String>,
}

fn write_text(path: &Path, body: &str) -> Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn upsample2(t: &Tensor) -> Tensor {
    let (h, w) = (t.shape()[0], t.shape()[1]);
    Tensor::from_fn([2 * h, 2 * w], |i| {
        let (y, x) = (i / (2 * w), i % (2 * w));
        t.at(&[y / 2, x / 2])
    })
}

/// `frames × c` at the video rate to two layers at twice the rate whose
/// layer mean, resampled back, reproduces the input.
fn encoder_like(x: &Tensor, rng: &mut Rng) -> Result<AudioClipFeatures> {
    let (f, c) = x.dims2()?;
    let mut up = Vec::with_capacity(2 * f * c);
    for s in 0..2 * f {
        let (a, b) = (x.row(s / 2), x.row(((s + 1) / 2).min(f - 1)));
        if s % 2 == 0 {
            up.extend_from_slice(a);
        } else {
            up.extend(a.iter().zip(b).map(|(p, q)| 0.5 * (p + q)));
        }
    }
    let delta: Vec<f64> = (0..2 * f * c).map(|_| 0.25 * rng.normal()).collect();
    let mut layers = Vec::with_capacity(4 * f * c);
    layers.extend(up.iter().zip(&delta).map(|(u, d)| u + d));
    layers.extend(up.iter().zip(&delta).map(|(u, d)| u - d));
    AudioClipFeatures::new(Tensor::new([2, 2 * f, c], layers)?, FIXTURE_AUDIO_RATE)
}

fn unit_rows(rng: &mut Rng, t: usize, d: usize) -> Tensor {
    let x = rng.normal_tensor([t, d]);
    Tensor::from_fn([t, d], |i| {
        let r = x.row(i / d);
        r[i % d] / r.iter().map(|v| v * v).sum::<f64>().sqrt()
    })
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<String>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else {
            let rel = path.strip_prefix(root).expect("under root");
            out.push(rel.to_string_lossy().replace('\\', "/"));
        }
    }
    Ok(())
}

/// Writes the fixture tree under `out_dir`. The same seed always yields
/// byte-identical files.
pub fn make_fixtures(seed: u64, out_dir: impl AsRef<Path>) -> Result<FixtureIndex> {
    let root = out_dir.as_ref();
    mkdir(root)?;
    let rng = Rng::new(seed);
    let model = ModelConfig::tiny();
    write_text(&root.join("model.json"), &to_pretty_sorted(&model)?)?;

    let mut clips = Vec::new();
    for i in 0..FIXTURE_CLIPS {
        let name = format!("clip_{i:03}");
        let clip_seed = rng.split(i as u64).seed();
        let clip = synthetic_clip(&model, FIXTURE_FRAMES, clip_seed)?;
        let masks = RegionMaskSet::new(
            upsample2(clip.masks.get(Region::Head)),
            upsample2(clip.masks.get(Region::Mouth)),
            upsample2(clip.masks.get(Region::Eyes)),
        )?;
        let audio = encoder_like(&clip.audio_features, &mut rng.split(1000 + i as u64))?;
        save_clip(root.join("clips").join(&name), &clip.ref_latent, &clip.latents, &masks, &audio)?;
        clips.push(name);
    }

    let init = Denoiser::init(model.clone(), rng.split(2000).seed())?;
    init.save(root.join("checkpoint"), serde_json::Value::Null)?;

    let mut train = TrainConfig::new(2, seed);
    train.model = model.clone();
    train.lr = 1e-3;
    train.steps = 20;
    train.data_dir = Some("clips".into());
    write_text(&root.join("train.json"), &to_pretty_sorted(&train)?)?;

    let cur = root.join("curation");
    mkdir(&cur)?;
    let corpus = planted_corpus(FIXTURE_CORPUS, rng.split(3000).seed());
    write_jsonl(cur.join("clips.jsonl"), &corpus.records)?;
    write_text(&cur.join("thresholds.json"), &to_pretty_sorted(&corpus.thresholds)?)?;
    write_text(&cur.join("manifest.json"), &to_pretty_sorted(&corpus.manifest)?)?;

    let ev = root.join("eval");
    mkdir(&ev)?;
    let mut er = rng.split(4000);
    lltf::write(ev.join("real.lltf"), &er.normal_tensor([200, 8]))?;
    let fake = er.normal_tensor([200, 8]).map(|v| 1.2 * v + 0.5);
    lltf::write(ev.join("fake.lltf"), &fake)?;
    let base = unit_rows(&mut er, 64 + FIXTURE_SYNC_OFFSET as usize, 16);
    let k = FIXTURE_SYNC_OFFSET as usize;
    let video = base.slice0(k, k + 64)?;
    let audio = base.slice0(0, 64)?;
    EmbeddingStream::new(video, DEFAULT_VIDEO_FPS)?.save(ev.join("video.lltf"))?;
    EmbeddingStream::new(audio, DEFAULT_VIDEO_FPS)?.save(ev.join("audio.lltf"))?;

    let mut files = Vec::new();
    collect_files(root, root, &mut files)?;
    files.retain(|f| f != "fixtures.json");
    files.push("fixtures.json".into());
    files.sort();
    let index = FixtureIndex {
        seed,
        fps: DEFAULT_VIDEO_FPS,
        model,
        clips,
        sync_offset: FIXTURE_SYNC_OFFSET,
        files,
    };
    write_text(&root.join("fixtures.json"), &to_pretty_sorted(&index)?)?;
    Ok(index)
}
