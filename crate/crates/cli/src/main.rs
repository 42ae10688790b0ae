//! `talkgate` command-line tool.
//!
//! Exit codes: 0 on success, 2 for invalid arguments, configs or inputs,
//! 1 for failures during computation or while writing outputs.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "talkgate", version, about = "Region-gated audio-conditioned portrait diffusion at desk scale")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train stage 1 or 2 from a JSON config.
    Train(TrainArgs),
    /// Generate a latent video from a checkpoint.
    Sample(SampleArgs),
    /// Run the four-stage clip filtration.
    Curate(CurateArgs),
    /// Compute an evaluation metric.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Finite-difference check of one training step.
    Gradcheck(GradcheckArgs),
    /// Write a deterministic synthetic dataset.
    MakeFixtures(FixtureArgs),
}

#[derive(Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides `out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `data_dir`.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Start from this checkpoint instead of a fresh initialization.
    #[arg(long)]
    pub init: Option<PathBuf>,
    #[arg(long, default_value_t = talkgate::audio::DEFAULT_VIDEO_FPS)]
    pub fps: f64,
}

#[derive(Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Reference latent, `C × H × W`.
    #[arg(long = "ref")]
    pub ref_latent: PathBuf,
    /// Directory with head.lltf, mouth.lltf and eyes.lltf.
    #[arg(long)]
    pub masks: PathBuf,
    /// Encoder features `L × f × c` with a `.json` sidecar.
    #[arg(long)]
    pub audio: PathBuf,
    #[arg(long)]
    pub frames: usize,
    #[arg(long)]
    pub seed: u64,
    /// Head, mouth and eyes scales, comma separated.
    #[arg(long, default_value = "1,1,1")]
    pub scales: String,
    #[arg(long, default_value_t = 0)]
    pub dilate_head: usize,
    #[arg(long, default_value_t = 0)]
    pub dilate_mouth: usize,
    #[arg(long, default_value_t = 0)]
    pub dilate_eyes: usize,
    #[arg(long, default_value_t = talkgate::audio::DEFAULT_VIDEO_FPS)]
    pub fps: f64,
    /// Image-to-image strength of the background pass.
    #[arg(long, default_value_t = 0.3)]
    pub background_strength: f64,
    #[arg(long)]
    pub no_background: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct CurateArgs {
    /// Clip records, one JSON object per line.
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub thresholds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum EvalCommand {
    /// Mean SSIM over the trailing H × W planes of two tensors.
    Ssim {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value_t = 7)]
        window: usize,
        #[arg(long, default_value_t = 1e-4)]
        c1: f64,
        #[arg(long, default_value_t = 9e-4)]
        c2: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Squared Fréchet distance between Gaussians fitted to two `N × d`
    /// feature sets.
    Frechet {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Offset and confidence of two `T × d` embedding streams.
    Sync {
        #[arg(long)]
        video: PathBuf,
        #[arg(long)]
        audio: PathBuf,
        #[arg(long, default_value_t = talkgate::metrics::DEFAULT_MAX_OFFSET)]
        max_offset: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Timestep of the checked example; defaults to T / 2.
    #[arg(long)]
    pub t: Option<usize>,
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tolerance: f64,
    #[arg(long, default_value_t = talkgate::audio::DEFAULT_VIDEO_FPS)]
    pub fps: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct FixtureArgs {
    #[arg(long)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Curate(a) => commands::curate(a),
        Command::Eval(e) => commands::eval(e),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::MakeFixtures(a) => commands::make_fixtures(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 2 } else { 1 })
        }
    }
}
