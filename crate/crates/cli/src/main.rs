//! `qmx`: synthesize data, train, evaluate, predict, run ablations and
//! report model complexity.

mod commands;
mod manifest;
mod plots;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use qmaxvit::Error;

#[derive(Debug, Parser)]
#[command(name = "qmx", version = manifest::VERSION, about = "Scribble-supervised segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic nested-shapes dataset in the on-disk layout.
    Synth(SynthArgs),
    /// Train a model (one fold, or every fold in turn).
    Train(TrainArgs),
    /// Evaluate a checkpoint: metric reports, curves and a qualitative panel.
    Eval(EvalArgs),
    /// Write predicted label maps for every record of a dataset.
    Predict(PredictArgs),
    /// Train and evaluate every row of an ablation grid.
    Ablate(AblateArgs),
    /// Parameter count, multiply-accumulates and inference latency.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Base width 96 (bottleneck width 768).
    Standard,
    /// Reduced widths for CPU training.
    Desk,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Grid {
    /// Eight on/off combinations of y2, query and edge.
    Components,
    /// Four loss-weight settings.
    Weights,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitName {
    All,
    Train,
    Val,
    Test,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Number of records.
    #[arg(long, default_value_t = 200)]
    pub n: usize,
    /// Image side in pixels.
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    /// Number of classes including background (at least 2).
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Patient-level split shared by training and evaluation.
#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Validation fold; all folds run in turn when omitted.
    #[arg(long)]
    pub fold: Option<usize>,
    /// Number of cross-validation folds; 1 trains on every non-test patient.
    #[arg(long, default_value_t = 1)]
    pub folds: usize,
    /// Patients held out for testing before folds are formed.
    #[arg(long, default_value_t = 0)]
    pub test_patients: usize,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// Side length images are resized to.
    #[arg(long, default_value_t = 256)]
    pub size: usize,
    /// Number of classes including background.
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    /// Image channels to load (1 or 3).
    #[arg(long, default_value_t = 1)]
    pub channels: usize,
    #[arg(long, value_enum, default_value_t = Preset::Standard)]
    pub preset: Preset,
    /// Disable the auxiliary decoder y2 and the pseudo-label loss.
    #[arg(long)]
    pub no_dual: bool,
    /// Disable the query-guided transformer.
    #[arg(long)]
    pub no_query: bool,
    /// Disable edge enhancement and the edge loss.
    #[arg(long)]
    pub no_edge: bool,
}

#[derive(Debug, Clone, Args)]
pub struct OptimArgs {
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    /// Initial AdamW learning rate (cosine-annealed to 0).
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// AdamW weight decay.
    #[arg(long, default_value_t = 0.01)]
    pub wd: f64,
    /// Weight of the scribble loss.
    #[arg(long, default_value_t = 1.0)]
    pub lambda1: f64,
    /// Weight of the pseudo-label loss.
    #[arg(long, default_value_t = 0.5)]
    pub lambda2: f64,
    /// Weight of the edge loss.
    #[arg(long, default_value_t = 0.2)]
    pub lambda3: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Clip the global gradient norm (to 1.0 when given without a value).
    #[arg(long, num_args = 0..=1, default_missing_value = "1.0", value_name = "NORM")]
    pub clip_grad: Option<f64>,
    /// Leave class 0 out of the Dice class mean.
    #[arg(long)]
    pub dice_no_background: bool,
    /// Train without random rotations and flips.
    #[arg(long)]
    pub no_augment: bool,
    /// Seed for weights, shuffling, augmentation and splits (QMX_SEED overrides).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Rows of the qualitative panel.
    #[arg(long, default_value_t = 4)]
    pub panel: usize,
    /// Training history to plot; defaults to history.csv beside the checkpoint.
    #[arg(long)]
    pub history: Option<PathBuf>,
    /// Which records to evaluate.
    #[arg(long, value_enum, default_value_t = SplitName::All)]
    pub split: SplitName,
    #[command(flatten)]
    pub split_args: SplitArgs,
    /// Seed of the patient split and panel sampling (QMX_SEED overrides).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Grid::Components)]
    pub grid: Grid,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report on this checkpoint instead of a freshly built model.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Timed forward passes.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write complexity.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Data(_) | Error::Io { .. } | Error::Image(_) | Error::Csv(_) | Error::Json(_) | Error::Checkpoint(_) => 3,
        Error::Numeric(_) => 4,
        Error::Shape(_) | Error::Tensor(_) => 1,
    }
}

/// `QMX_SEED`, when set, replaces the command-line seed.
fn seed_override() -> Result<Option<u64>, Error> {
    match std::env::var("QMX_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("QMX_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(None),
    }
}

fn run(cli: Cli) -> Result<(), Error> {
    let seed = seed_override()?;
    match cli.command {
        Command::Synth(mut a) => {
            a.seed = seed.unwrap_or(a.seed);
            commands::synth(&a)
        }
        Command::Train(mut a) => {
            a.optim.seed = seed.unwrap_or(a.optim.seed);
            commands::train(&a)
        }
        Command::Eval(mut a) => {
            a.seed = seed.unwrap_or(a.seed);
            commands::eval(&a)
        }
        Command::Predict(a) => commands::predict(&a),
        Command::Ablate(mut a) => {
            a.optim.seed = seed.unwrap_or(a.optim.seed);
            commands::ablate(&a)
        }
        Command::Report(mut a) => {
            a.seed = seed.unwrap_or(a.seed);
            commands::report(&a)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
