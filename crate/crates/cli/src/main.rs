//! `ctrlx`: dataset generation, training, controlled sampling, feature
//! visualisation, evaluation and ablation.
//!
//! Exit status is 0 on success, 1 on a usage error and 2 on a runtime error.
//! Messages go to standard error; results go to files.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use ctrlx::pipeline::Mode;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, inputs or configuration; nothing was computed.
    Usage(String),
    Runtime(String),
}

impl From<ctrlx::Error> for CliError {
    fn from(e: ctrlx::Error) -> Self {
        match e {
            ctrlx::Error::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

#[derive(Parser)]
#[command(name = "ctrlx", version, about = "Structure and appearance control for a toy diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write scenes, their condition renderings, a manifest and a pair manifest.
    MakeDataset(MakeDatasetArgs),
    /// Train a denoiser on a dataset manifest.
    Train(TrainArgs),
    /// One controlled generation.
    Run(RunArgs),
    /// PCA maps of denoiser features over a manifest at chosen timesteps.
    VizFeatures(VizArgs),
    /// Score controlled runs against the uncontrolled baseline over a pair manifest.
    Eval(PairArgs),
    /// Run the ablation grid over a pair manifest.
    Ablate(PairArgs),
}

#[derive(Args)]
pub struct Common {
    /// Run file (TOML).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory; overrides `paths.output`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args)]
pub struct MakeDatasetArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of evaluation pairs written to `pairs.jsonl`.
    #[arg(long, default_value_t = 20)]
    pub pairs: usize,
    /// Base seed of the pair scenes, disjoint from the training scenes.
    #[arg(long, default_value_t = 7)]
    pub pair_seed: u64,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory holding `manifest.jsonl`; overrides `paths.dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Overrides `train.steps`.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overrides `train.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Save an intermediate checkpoint every this many steps; 0 disables.
    #[arg(long, default_value_t = 0)]
    pub checkpoint_every: usize,
}

#[derive(Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub common: Common,
    /// Overrides `paths.checkpoint`.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Structure image (binary PPM).
    #[arg(long)]
    pub structure: Option<PathBuf>,
    /// Appearance image (binary PPM).
    #[arg(long)]
    pub appearance: Option<PathBuf>,
    /// Overrides `run.mode`.
    #[arg(long)]
    pub mode: Option<Mode>,
    /// Overrides `run.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cond_s: Option<usize>,
    #[arg(long)]
    pub cond_a: Option<usize>,
    #[arg(long)]
    pub cond_o: Option<usize>,
}

#[derive(Args)]
pub struct VizArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Overrides `paths.dataset`.
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_value = "961,921,881")]
    pub timesteps: Vec<usize>,
    #[arg(long, default_value = "decoder.0.conv")]
    pub layer: String,
    /// Number of manifest scenes to include.
    #[arg(long, default_value_t = 6)]
    pub count: usize,
    #[arg(long, default_value_t = 3)]
    pub components: usize,
}

#[derive(Args)]
pub struct PairArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pair manifest written by `make-dataset`.
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Overrides `run.seed`; pair `i` samples with seed `seed + i`.
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::MakeDataset(a) => commands::make_dataset(a),
        Command::Train(a) => commands::train(a),
        Command::Run(a) => commands::run(a),
        Command::VizFeatures(a) => commands::viz_features(a),
        Command::Eval(a) => commands::eval(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
