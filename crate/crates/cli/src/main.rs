mod commands;
mod config;
mod figures;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand};
use probsam_core::metrics::SamplingMode;
use probsam_core::training::TrainMode;

/// Probabilistic box-prompted segmentation: data generation, training,
/// sampling, evaluation and gradient checking.
#[derive(Parser, Debug)]
#[command(name = "probsam", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic multi-annotator dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Draw masks for one image and box.
    Sample(SampleArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Compare analytic and finite-difference gradients on a tiny model.
    Gradcheck(GradcheckArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Sample(_) => "sample",
            Command::Eval(_) => "eval",
            Command::Gradcheck(_) => "gradcheck",
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// TOML configuration file; command-line flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the command.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (optional for gradcheck).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Number of samples (n_samples).
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub annotators: Option<usize>,
    /// Probability that an annotator marks no lesion.
    #[arg(long)]
    pub p_miss: Option<f64>,
    /// Width of the per-annotator threshold spread.
    #[arg(long)]
    pub threshold_spread: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub box_jitter: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory written by gen-data.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// KL weight.
    #[arg(long)]
    pub beta: Option<f64>,
    /// Validation interval in steps (0 disables).
    #[arg(long)]
    pub eval_every: Option<usize>,
    #[arg(long, value_parser = parse_train_mode)]
    pub mode: Option<TrainMode>,
    /// Keep all decoder tensors at their initial values.
    #[arg(long)]
    pub freeze_decoder: bool,
    /// Write an intermediate checkpoint every N steps (0 disables).
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory holding the sample named by --id.
    #[arg(long, requires = "id")]
    pub data: Option<PathBuf>,
    #[arg(long, requires = "data")]
    pub id: Option<String>,
    /// Grayscale PNG to segment instead of a dataset sample.
    #[arg(long, conflicts_with = "data")]
    pub image: Option<PathBuf>,
    /// Box prompt `x1,y1,x2,y2` (upper corner exclusive).
    #[arg(long = "box")]
    pub r#box: Option<String>,
    /// Number of masks to draw.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_parser = parse_sampling_mode)]
    pub mode: Option<SamplingMode>,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// train, val or test.
    #[arg(long)]
    pub split: Option<String>,
    /// Samples per image.
    #[arg(long)]
    pub m: Option<usize>,
    #[arg(long, value_parser = parse_sampling_mode)]
    pub mode: Option<SamplingMode>,
    /// Sampling mode of the comparison baseline (prior, prior-mean, dropout).
    #[arg(long, value_parser = parse_sampling_mode)]
    pub baseline: Option<SamplingMode>,
    /// Checkpoint of the baseline model; defaults to --checkpoint.
    #[arg(long, requires = "baseline")]
    pub baseline_checkpoint: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// KL weight of the checked objective.
    #[arg(long, default_value_t = probsam_core::losses::DEFAULT_BETA)]
    pub beta: f64,
    /// Round finite-difference losses to f32 and apply the looser threshold.
    #[arg(long)]
    pub single_precision: bool,
    /// Scale the Dice gradient by 1.5 (negative control).
    #[arg(long, hide = true)]
    pub inject_dice_grad_fault: bool,
}

fn parse_sampling_mode(s: &str) -> Result<SamplingMode, String> {
    s.parse().map_err(|e: probsam_core::Error| e.to_string())
}

fn parse_train_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "probabilistic" => Ok(TrainMode::Probabilistic),
        "dropout" => Ok(TrainMode::Dropout),
        other => Err(format!("unknown training mode {other:?} (probabilistic or dropout)")),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    let result = match &cli.command {
        Command::GenData(a) => commands::gen_data(a).map(|_| 0),
        Command::Train(a) => commands::train(a).map(|_| 0),
        Command::Sample(a) => commands::sample(a).map(|_| 0),
        Command::Eval(a) => commands::eval(a).map(|_| 0),
        Command::Gradcheck(a) => commands::gradcheck(a),
    };
    match result {
        Ok(0) => ExitCode::SUCCESS,
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e:#}");
            let invalid = e
                .chain()
                .any(|c| matches!(c.downcast_ref::<probsam_core::Error>(), Some(probsam_core::Error::Validation(_))));
            if invalid {
                let mut cmd = Cli::command();
                if let Some(sub) = cmd.find_subcommand_mut(name) {
                    eprintln!("\n{}", sub.render_usage());
                }
            }
            ExitCode::FAILURE
        }
    }
}
