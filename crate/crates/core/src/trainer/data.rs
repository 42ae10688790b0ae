//! On-disk training clips.
//!
//! A dataset directory holds one subdirectory per clip:
//!
//! ```text
//! clip_000/
//!   ref.lltf          C × H × W
//!   latents.lltf      K × C × H × W
//!   masks/{head,mouth,eyes}.lltf   any resolution that pools to H × W
//!   audio.lltf        L × f × c_audio, with audio.json {source_rate}
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use super::synthetic::ClipSample;
use crate::audio::{prepare_audio, AudioClipFeatures};
use crate::denoiser::ModelConfig;
use crate::error::{shape_err, Error, Result};
use crate::fusion::{prepare_region_masks, RegionMaskSet};
use crate::numerics::{lltf, Tensor};

pub const REF_FILE: &str = "ref.lltf";
pub const LATENTS_FILE: &str = "latents.lltf";
pub const MASKS_DIR: &str = "masks";
pub const AUDIO_FILE: &str = "audio.lltf";

/// Loads one clip, pooling masks to latent resolution and blocking audio
/// at `fps`.
pub fn load_clip(dir: impl AsRef<Path>, cfg: &ModelConfig, fps: f64) -> Result<ClipSample> {
    let dir = dir.as_ref();
    let ref_latent = lltf::read_rank(dir.join(REF_FILE), 3)?;
    let frames = lltf::read_rank(dir.join(LATENTS_FILE), 4)?;
    let k = cfg.check_latents(&frames, "clip latents")?;
    if ref_latent.shape() != cfg.frame_shape() {
        return Err(shape_err!(
            "{}: reference latent {:?} is not {:?}",
            dir.display(),
            ref_latent.shape(),
            cfg.frame_shape()
        ));
    }
    let masks = prepare_region_masks(&RegionMaskSet::load(dir.join(MASKS_DIR))?, cfg.height, cfg.width)?;
    let feats = AudioClipFeatures::load(dir.join(AUDIO_FILE))?;
    let covered = (feats.frames() as f64 * fps / feats.source_rate).round() as usize;
    if covered < k {
        return Err(Error::Input(format!(
            "{}: audio covers {covered} video frames, clip has {k}",
            dir.display()
        )));
    }
    let audio = prepare_audio(&feats, fps, cfg.audio_context, Some(k))?;
    Ok(ClipSample {
        ref_latent,
        frames,
        masks,
        audio,
    })
}

/// Clip subdirectories of `data_dir` in name order.
pub fn clip_dirs(data_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    let data_dir = data_dir.as_ref();
    let mut dirs: Vec<PathBuf> = fs::read_dir(data_dir)
        .map_err(|e| Error::io(data_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(LATENTS_FILE).is_file())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::EmptyInput(format!("no clips under {}", data_dir.display())));
    }
    Ok(dirs)
}

pub fn load_dataset(data_dir: impl AsRef<Path>, cfg: &ModelConfig, fps: f64) -> Result<Vec<ClipSample>> {
    clip_dirs(data_dir)?.iter().map(|d| load_clip(d, cfg, fps)).collect()
}

/// Writes `clip` in the layout [`load_clip`] reads, with masks as given
/// and audio as `audio` features.
pub fn save_clip(
    dir: impl AsRef<Path>,
    ref_latent: &Tensor,
    latents: &Tensor,
    masks: &RegionMaskSet,
    audio: &AudioClipFeatures,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    lltf::write(dir.join(REF_FILE), ref_latent)?;
    lltf::write(dir.join(LATENTS_FILE), latents)?;
    masks.save(dir.join(MASKS_DIR))?;
    audio.save(dir.join(AUDIO_FILE))
}
