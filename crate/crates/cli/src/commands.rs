use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;
use serde_json::json;

use talkgate::audio::{prepare_audio, AudioClipFeatures};
use talkgate::curation::{read_jsonl, run_pipeline, summarize_rejections, write_jsonl, CurationThresholds};
use talkgate::denoiser::{
    default_background_mask, sample_video, stabilize_with_model, Denoiser, SampleRequest,
};
use talkgate::fusion::{prepare_region_masks, Region, RegionMaskSet, RegionScales};
use talkgate::json::to_pretty_sorted;
use talkgate::metrics::{fit_moments, frechet_distance, ssim_planes, sync_confidence, EmbeddingStream};
use talkgate::numerics::lltf;
use talkgate::trainer::{
    check_step_gradients, load_clip, load_dataset, clip_dirs, synthetic_clip, train_stage1, train_stage2,
    TrainConfig,
};
use talkgate::{Error, Result};

use crate::{CurateArgs, EvalCommand, FixtureArgs, GradcheckArgs, SampleArgs, TrainArgs};

fn require_file(flag: &str, path: &Path) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::Config(format!("{flag}: no such file {}", path.display())))
    }
}

fn require_dir(flag: &str, path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::Config(format!("{flag}: no such directory {}", path.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(flag: &str, path: &Path) -> Result<T> {
    require_file(flag, path)?;
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.into(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.into(),
        msg: e.to_string(),
    })
}

/// Output directory handle; every write goes through it.
struct Out(PathBuf);

impl Out {
    fn create(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.into(),
            source: e,
        })?;
        Ok(Self(dir.to_path_buf()))
    }

    fn path(&self, name: &str) -> PathBuf {
        self.0.join(name)
    }

    fn text(&self, name: &str, body: &str) -> Result<()> {
        let p = self.path(name);
        fs::write(&p, body).map_err(|e| Error::Io { path: p, source: e })
    }

    fn json<T: Serialize>(&self, name: &str, value: &T) -> Result<()> {
        self.text(name, &to_pretty_sorted(value)?)
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    print!("{}", to_pretty_sorted(value)?);
    Ok(())
}

/// Relative paths in a config file are taken from the file's directory.
fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.parent().unwrap_or(Path::new(".")).join(p)
    }
}

fn parse_scales(s: &str) -> Result<RegionScales> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let bad = || Error::Config(format!("--scales: expected three numbers head,mouth,eyes, got `{s}`"));
    if parts.len() != 3 {
        return Err(bad());
    }
    let v: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    if v.iter().any(|x| !x.is_finite()) {
        return Err(bad());
    }
    Ok(RegionScales {
        head: v[0],
        mouth: v[1],
        eyes: v[2],
    })
}

#[derive(Serialize)]
struct TrainSummary {
    stage: u8,
    steps_run: usize,
    initial_loss: f64,
    final_loss: f64,
    best_reduction: f64,
    losses: Vec<f64>,
    checksum: String,
    trainable_values: usize,
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_json("--config", &a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(lr) = a.lr {
        cfg.lr = lr;
    }
    cfg.data_dir = match (a.data_dir, cfg.data_dir.take()) {
        (Some(d), _) => Some(d),
        (None, Some(d)) => Some(resolve(&a.config, &d)),
        (None, None) => None,
    };
    cfg.out_dir = match (a.out, cfg.out_dir.take()) {
        (Some(d), _) => Some(d),
        (None, Some(d)) => Some(resolve(&a.config, &d)),
        (None, None) => None,
    };
    let out_dir = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::Config("out_dir: not set; pass --out or set it in the config".into()))?;
    let data_dir = cfg
        .data_dir
        .clone()
        .ok_or_else(|| Error::Config("data_dir: not set; pass --data-dir or set it in the config".into()))?;
    require_dir("data_dir", &data_dir)?;
    let mut model = match &a.init {
        Some(dir) => {
            require_dir("--init", dir)?;
            let m = Denoiser::load(dir)?;
            cfg.model = m.config.clone();
            m
        }
        None => Denoiser::init(cfg.model.clone(), cfg.seed)?,
    };
    cfg.validate()?;
    let clips = load_dataset(&data_dir, &cfg.model, a.fps)?;

    let out = Out::create(&out_dir)?;
    out.json("config.json", &cfg)?;
    let report = if cfg.stage == 1 {
        let images = clips
            .iter()
            .map(|c| c.image_samples())
            .collect::<Result<Vec<_>>>()?
            .concat();
        train_stage1(&mut model, &images, &cfg)?
    } else {
        train_stage2(&mut model, &clips, &cfg)?
    };
    model.save(out.path("checkpoint"), json!({ "stage": cfg.stage, "steps": report.losses.len() }))?;
    let summary = TrainSummary {
        stage: report.stage,
        steps_run: report.losses.len(),
        initial_loss: report.initial_loss(),
        final_loss: report.final_loss(),
        best_reduction: report.best_reduction(),
        losses: report.losses.clone(),
        checksum: report.checksum.clone(),
        trainable_values: report.trainable_values,
    };
    out.json("summary.json", &summary)?;
    eprintln!("trained {} steps in {:.2}s", report.losses.len(), report.wall_time_s);
    print_json(&summary)
}

pub fn sample(a: SampleArgs) -> Result<()> {
    let scales = parse_scales(&a.scales)?;
    if a.frames == 0 {
        return Err(Error::Config("--frames: must be at least 1".into()));
    }
    if !(a.fps > 0.0) {
        return Err(Error::Config("--fps: must be positive".into()));
    }
    if !(0.0..=1.0).contains(&a.background_strength) {
        return Err(Error::Config("--background-strength: must lie in [0, 1]".into()));
    }
    require_dir("--ckpt", &a.ckpt)?;
    require_file("--ref", &a.ref_latent)?;
    require_dir("--masks", &a.masks)?;
    require_file("--audio", &a.audio)?;

    let model = Denoiser::load(&a.ckpt)?;
    let cfg = &model.config;
    let ref_latent = lltf::read_rank(&a.ref_latent, 3)?;
    let mut masks = RegionMaskSet::load(&a.masks)?;
    for (r, k) in [(Region::Head, a.dilate_head), (Region::Mouth, a.dilate_mouth), (Region::Eyes, a.dilate_eyes)] {
        masks = masks.dilate(r, k);
    }
    let masks = prepare_region_masks(&masks, cfg.height, cfg.width)?;
    let feats = AudioClipFeatures::load(&a.audio)?;
    let audio = prepare_audio(&feats, a.fps, cfg.audio_context, None)?;
    if audio.frames() < a.frames {
        return Err(Error::Input(format!(
            "--audio: covers {} video frames at {} fps, --frames asks for {}",
            audio.frames(),
            a.fps,
            a.frames
        )));
    }
    let req = SampleRequest {
        ref_latent: &ref_latent,
        masks: &masks,
        audio: &audio,
        scales,
        total_frames: a.frames,
        seed: a.seed,
    };
    let (mut video, trace) = sample_video(&model, &req)?;
    let background = !a.no_background && a.background_strength > 0.0;
    if background {
        let bg = default_background_mask(&masks);
        video = stabilize_with_model(&model, &video, &ref_latent, &masks, &bg, a.background_strength, a.seed)?;
    }

    let out = Out::create(&a.out)?;
    out.json(
        "config.json",
        &json!({
            "ckpt": a.ckpt,
            "ref": a.ref_latent,
            "masks": a.masks,
            "audio": a.audio,
            "frames": a.frames,
            "seed": a.seed,
            "scales": scales,
            "dilate": { "head": a.dilate_head, "mouth": a.dilate_mouth, "eyes": a.dilate_eyes },
            "fps": a.fps,
            "background": { "enabled": background, "strength": a.background_strength },
            "model": cfg,
        }),
    )?;
    video.save(out.path("video.lltf"))?;
    out.json("trace.json", &trace)?;
    let summary = json!({
        "frames": video.frames(),
        "shape": video.tensor().shape(),
        "chunks": trace.chunks.len(),
        "video": "video.lltf",
    });
    out.json("summary.json", &summary)?;
    print_json(&summary)
}

pub fn curate(a: CurateArgs) -> Result<()> {
    require_file("--in", &a.input)?;
    let thresholds: CurationThresholds = read_json("--thresholds", &a.thresholds)?;
    thresholds.validate()?;
    let records = read_jsonl(&a.input)?;
    let outcome = run_pipeline(records, &thresholds)?;
    let hist = summarize_rejections(&outcome.records)?;

    let out = Out::create(&a.out)?;
    out.json("config.json", &json!({ "in": a.input, "thresholds": thresholds }))?;
    out.json("report.json", &outcome.report)?;
    let table = outcome.report.render_table();
    out.text("report.txt", &table)?;
    write_jsonl(out.path("records.jsonl"), &outcome.records)?;
    out.json("rejections.json", &hist)?;
    print!("{table}");
    Ok(())
}

fn finish_eval<T: Serialize>(out: Option<PathBuf>, config: serde_json::Value, result: &T) -> Result<()> {
    if let Some(dir) = out {
        let out = Out::create(&dir)?;
        out.json("config.json", &config)?;
        out.json("result.json", result)?;
    }
    print_json(result)
}

pub fn eval(e: EvalCommand) -> Result<()> {
    match e {
        EvalCommand::Ssim { a, b, window, c1, c2, out } => {
            require_file("--a", &a)?;
            require_file("--b", &b)?;
            let (ta, tb) = (lltf::read(&a)?, lltf::read(&b)?);
            let v = ssim_planes(&ta, &tb, window, c1, c2)?;
            let cfg = json!({ "metric": "ssim", "a": a, "b": b, "window": window, "c1": c1, "c2": c2 });
            finish_eval(out, cfg, &json!({ "ssim": v }))
        }
        EvalCommand::Frechet { a, b, out } => {
            require_file("--a", &a)?;
            require_file("--b", &b)?;
            let (fa, fb) = (lltf::read_rank(&a, 2)?, lltf::read_rank(&b, 2)?);
            let d = frechet_distance(&fit_moments(&fa)?, &fit_moments(&fb)?)?;
            let cfg = json!({ "metric": "frechet", "a": a, "b": b });
            let result = json!({
                "frechet_distance": d,
                "n_a": fa.shape()[0],
                "n_b": fb.shape()[0],
                "dim": fa.shape()[1],
            });
            finish_eval(out, cfg, &result)
        }
        EvalCommand::Sync { video, audio, max_offset, out } => {
            require_file("--video", &video)?;
            require_file("--audio", &audio)?;
            let v = EmbeddingStream::load(&video)?;
            let s = EmbeddingStream::load(&audio)?;
            let r = sync_confidence(&v, &s, max_offset)?;
            let cfg = json!({ "metric": "sync", "video": video, "audio": audio, "max_offset": max_offset });
            finish_eval(out, cfg, &r)
        }
    }
}

pub fn gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut cfg: TrainConfig = read_json("--config", &a.config)?;
    cfg.data_dir = cfg.data_dir.take().map(|d| resolve(&a.config, &d));
    let model = match &a.ckpt {
        Some(dir) => {
            require_dir("--ckpt", dir)?;
            let m = Denoiser::load(dir)?;
            cfg.model = m.config.clone();
            m
        }
        None => Denoiser::init(cfg.model.clone(), cfg.seed)?,
    };
    cfg.validate()?;
    let mc = &cfg.model;
    let t = a.t.unwrap_or(mc.timesteps / 2);
    if t >= mc.timesteps {
        return Err(Error::Config(format!("--t: must be below {}", mc.timesteps)));
    }
    if !(a.tolerance > 0.0) {
        return Err(Error::Config("--tolerance: must be positive".into()));
    }
    let clip = match &cfg.data_dir {
        Some(d) => {
            require_dir("data_dir", d)?;
            load_clip(&clip_dirs(d)?[0], mc, a.fps)?
        }
        None => synthetic_clip(mc, mc.motion_frames + mc.video_length, cfg.seed)?.clip_sample(mc.audio_context)?,
    };
    let report = check_step_gradients(&model, &clip, &cfg, t, cfg.seed, a.eps)?;
    let passed = report.passed(a.tolerance);
    let result = json!({
        "passed": passed,
        "tolerance": a.tolerance,
        "eps": a.eps,
        "t": t,
        "stage": cfg.stage,
        "report": report,
    });
    if let Some(dir) = &a.out {
        let out = Out::create(dir)?;
        out.json("config.json", &cfg)?;
        out.json("gradcheck.json", &result)?;
    }
    print_json(&result)?;
    if passed {
        Ok(())
    } else {
        Err(Error::Numeric(format!(
            "max relative error {:.3e} at `{}` reaches tolerance {:.1e}",
            report.max_rel_error, report.worst_param, a.tolerance
        )))
    }
}

pub fn make_fixtures(a: FixtureArgs) -> Result<()> {
    let index = talkgate::fixtures::make_fixtures(a.seed, &a.out)?;
    print_json(&json!({ "seed": index.seed, "files": index.files.len(), "clips": index.clips }))
}
