//! Command-line surface: `train`, `eval`, `infer` and `gen-data`.

pub mod commands;
pub mod common;
pub mod error;
pub mod infer;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::common::ImageSource;
use crate::error::CliResult;
use crate::infer::{EditList, Mode};

#[derive(Debug, Parser)]
#[command(name = "attrbridge", version, about = "Multi-attribute image translation on a synthetic dataset")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train from a config, writing checkpoints, a loss log and sample grids.
    Train(TrainArgs),
    /// Score a checkpoint on the test split.
    Eval(EvalArgs),
    /// Translate one source image.
    Infer(InferArgs),
    /// Render the synthetic dataset to disk.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the config's step budget.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides the config's seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Continue from a checkpoint written with the same config.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Refuse the checkpoint unless it was trained with this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Leading test samples used as sources.
    #[arg(long, default_value_t = 512)]
    pub sources: usize,
    #[arg(long, default_value_t = 64)]
    pub diversity_sources: usize,
    #[arg(long, default_value_t = 4)]
    pub samples_per_source: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Report path; defaults to `metrics.txt` in the output directory.
    #[arg(long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub mode: Mode,
    /// Dataset sample id or pixmap path.
    #[arg(long)]
    pub source: ImageSource,
    /// Source label as a bit string, for files the oracle cannot read.
    #[arg(long)]
    pub source_label: Option<String>,
    /// Reference sample id or pixmap path; repeat for several.
    #[arg(long)]
    pub reference: Vec<ImageSource>,
    /// Attribute edits, e.g. `stripes=1,square_shape=0`.
    #[arg(long)]
    pub edit: Option<EditList>,
    /// Comma-separated interpolation rates.
    #[arg(long, value_delimiter = ',', conflicts_with = "alpha_count")]
    pub alpha: Option<Vec<f64>>,
    /// Uniform rate grid including both endpoints.
    #[arg(long)]
    pub alpha_count: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Label-mode samples.
    #[arg(long, default_value_t = 1)]
    pub samples: usize,
    /// Grid pixmap path; captions go next to it.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Also write every image as a pixmap.
    #[arg(long)]
    pub images: bool,
}

pub fn run(cli: Cli) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Infer(a) => commands::infer(&a),
        Command::GenData(a) => commands::gen_data(&a),
    }
}
