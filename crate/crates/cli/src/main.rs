use std::path::PathBuf;
use std::process::ExitCode;

use baton::nn::PredictionTarget;
use baton::Error;
use clap::{Args, Parser, Subcommand};

mod commands;
mod config;
mod plot;

/// Music-conditioned conducting-motion generation.
///
/// Exit codes: 0 ok, 2 bad arguments or configuration, 3 IO or malformed
/// files, 4 training diverged, 5 sampling diverged.
#[derive(Parser, Debug)]
#[command(name = "baton", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML run configuration with sectioned keys (stage1.lr, sampler.steps, ...).
    #[arg(long, value_name = "FILE")]
    pub config: Option<PathBuf>,
    /// Override one configuration key, e.g. `--set stage2.batch_size=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic metronome-conductor dataset with known beats.
    MakeData(MakeData),
    /// Contrastive pretraining of the music and motion encoders.
    TrainContrastive(TrainContrastive),
    /// Train the diffusion generator on top of a stage-one checkpoint.
    TrainDiffusion(TrainDiffusion),
    /// Sample motion for every music clip of a dataset split.
    Generate(Generate),
    /// Score generated motion against ground truth.
    Evaluate(Evaluate),
}

#[derive(Args, Debug)]
pub struct MakeData {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub clips: Option<usize>,
    /// Motion frames per clip.
    #[arg(long)]
    pub frames: Option<usize>,
    /// Inclusive beat-period range in motion frames, `MIN:MAX`.
    #[arg(long, value_name = "MIN:MAX")]
    pub beat_period_range: Option<String>,
    #[arg(long)]
    pub bands: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainContrastive {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct TrainDiffusion {
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-one checkpoint providing the music and motion encoders.
    #[arg(long, required_unless_present = "resume")]
    pub stage1: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// What the denoiser predicts; `eps` trains the noise-prediction ablation.
    #[arg(long, default_value = "x0")]
    pub predict: PredictionTarget,
    /// Continue a stage-two checkpoint instead of starting from stage one.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct Generate {
    /// Stage-two checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Dataset directory supplying the music.
    #[arg(long)]
    pub music: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Only generate for this clip id.
    #[arg(long)]
    pub clip: Option<String>,
    #[arg(long)]
    pub out: PathBuf,
    /// DDIM steps (equal to T with eta 1 reproduces the full ancestral chain).
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub guidance: Option<f64>,
    /// `ddim` or `ddpm`.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Args, Debug)]
pub struct Evaluate {
    /// Ground-truth dataset directory.
    #[arg(long)]
    pub gt: PathBuf,
    /// Generated dataset directory (output of `generate`).
    #[arg(long)]
    pub gen: PathBuf,
    /// Checkpoint whose motion encoder extracts latent features.
    #[arg(long)]
    pub stage1: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub common: Common,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io { .. } | Error::Format { .. } => 3,
        Error::TrainingDiverged(_) => 4,
        Error::SamplingDiverged { .. } => 5,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(a) => commands::make_data(a),
        Command::TrainContrastive(a) => commands::train_contrastive(a),
        Command::TrainDiffusion(a) => commands::train_diffusion(a),
        Command::Generate(a) => commands::generate(a),
        Command::Evaluate(a) => commands::evaluate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
