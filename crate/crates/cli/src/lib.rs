//! Command-line front end: `decompose`, `train`, `eval`, `count`, `simulate`, `compare`.
//!
//! Every subcommand writes JSON and text reports under `--out`. Exit code 1 means the input
//! was rejected (bad flags, config, dataset or checkpoint), 2 means the run itself failed.

pub mod commands;
pub mod config;
pub mod error;
pub mod golden;
pub mod output;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use ttsnn::accelsim::Design;
use ttsnn::train::{ModelMode, Split};

pub use config::{ExperimentConfig, ModelRef, RankSource};
pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ttsnn", version, about = "Tensor-train spiking network training and accelerator simulation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// TT-decompose one kernel file, or initialise a model and assign its ranks.
    Decompose(DecomposeArgs),
    /// Train from a JSON experiment config, then merge and evaluate.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Parameter and FLOP counts of a model.
    Count(CountArgs),
    /// Energy and latency of one workload on one accelerator design.
    Simulate(SimArgs),
    /// Dense and all TT variants on both designs.
    Compare(CompareArgs),
}

#[derive(Debug, Clone, Args)]
pub struct CommonArgs {
    /// Output directory for reports.
    #[arg(long, default_value = "ttsnn-out")]
    pub out: PathBuf,
    /// Seed for every random choice (weight init feeding rank estimators).
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave wall-clock fields out of reports so reruns are byte-identical.
    #[arg(long)]
    pub no_timestamp: bool,
}

#[derive(Debug, Clone, Args)]
pub struct ModelArgs {
    /// tiny6, resnet18, resnet18-c100 or resnet34.
    #[arg(long, default_value = "resnet18")]
    pub arch: String,
    /// Timesteps per image.
    #[arg(long, default_value_t = 4)]
    pub timesteps: usize,
}

fn parse_mode(s: &str) -> Result<ModelMode, String> {
    s.parse().map_err(|e: ttsnn::Error| e.to_string())
}

fn parse_design(s: &str) -> Result<Design, String> {
    s.parse().map_err(|e: ttsnn::Error| e.to_string())
}

fn parse_ranks(s: &str) -> Result<RankSource, String> {
    s.parse().map_err(|e: CliError| e.to_string())
}

fn parse_split(s: &str) -> Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "test" => Ok(Split::Test),
        _ => Err(format!("unknown split {s:?} (train or test)")),
    }
}

const RANKS_HELP: &str = "Rank source: a preset (tiny6, paper-resnet18, paper-resnet34), a list (8,12,16,24), \
     @file.json, vbmf, or energy:<fraction>";

#[derive(Debug, Clone, Args)]
pub struct DecomposeArgs {
    /// Kernel file `(O, I, K, K)` in the tensor format; without it the model given by --arch is
    /// initialised and decomposed layer by layer.
    #[arg(long)]
    pub input: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// baseline, stt, ptt or htt.
    #[arg(long, default_value = "ptt", value_parser = parse_mode)]
    pub mode: ModelMode,
    #[arg(long, default_value = "vbmf", value_parser = parse_ranks, help = RANKS_HELP)]
    pub ranks: RankSource,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    pub config: PathBuf,
    /// Run directory (overrides the config's `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long = "seed")]
    pub common_seed: Option<u64>,
    /// Leave wall-clock fields out of reports so reruns are byte-identical.
    #[arg(long)]
    pub no_timestamp: bool,
    /// Overrides `train.epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Overrides `train.lr`.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides `train.batch_size`.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Overrides the config mode: baseline, stt, ptt or htt.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<ModelMode>,
    /// Root for relative dataset paths (default: $TTSNN_DATA_DIR, then the config's directory).
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Checkpoint directory written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Take the dataset from this experiment config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Inline dataset source as JSON, e.g. '{"format":"mnist-idx","path":"mnist"}'.
    #[arg(long)]
    pub data: Option<String>,
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long, default_value = "test", value_parser = parse_split)]
    pub split: Split,
    /// Merge TT layers into dense kernels before evaluating.
    #[arg(long)]
    pub merge: bool,
    #[arg(long, default_value_t = 200)]
    pub batch_size: usize,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CountArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// baseline, stt, ptt or htt.
    #[arg(long, default_value = "ptt", value_parser = parse_mode)]
    pub mode: ModelMode,
    #[arg(long, default_value = "paper-resnet18", value_parser = parse_ranks, help = RANKS_HELP)]
    pub ranks: RankSource,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SimArgs {
    /// single-engine or multicluster.
    #[arg(long, default_value = "multicluster", value_parser = parse_design)]
    pub design: Design,
    /// baseline, stt, ptt or htt.
    #[arg(long, default_value = "ptt", value_parser = parse_mode)]
    pub mode: ModelMode,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Model spec JSON (for example the `spec` of a checkpoint manifest) instead of --arch.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long, default_value = "paper-resnet18", value_parser = parse_ranks, help = RANKS_HELP)]
    pub ranks: RankSource,
    /// Fraction of nonzero input spikes.
    #[arg(long, default_value_t = 0.15)]
    pub density: f64,
    /// Take the spike density from the last epoch's firing rate in a `train` report.json.
    #[arg(long, conflicts_with = "density")]
    pub density_from: Option<PathBuf>,
    /// Hardware config JSON (default: 4 clusters of 32 PEs, 272 KB global buffer).
    #[arg(long)]
    pub hardware: Option<PathBuf>,
    /// Energy table preset name or JSON file.
    #[arg(long, default_value = "default-28nm")]
    pub energy_table: String,
    /// Golden file: written when missing, otherwise the report must match it.
    #[arg(long)]
    pub golden: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Debug, Clone, Args)]
pub struct CompareArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value = "paper-resnet18", value_parser = parse_ranks, help = RANKS_HELP)]
    pub ranks: RankSource,
    /// Fraction of nonzero input spikes.
    #[arg(long, default_value_t = 0.15)]
    pub density: f64,
    /// Hardware config JSON (default: 4 clusters of 32 PEs, 272 KB global buffer).
    #[arg(long)]
    pub hardware: Option<PathBuf>,
    /// Energy table preset name or JSON file.
    #[arg(long, default_value = "default-28nm")]
    pub energy_table: String,
    /// Golden file: written when missing, otherwise the report must match it.
    #[arg(long)]
    pub golden: Option<PathBuf>,
    #[command(flatten)]
    pub common: CommonArgs,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match &cli.command {
        Command::Decompose(a) => commands::decompose(a),
        Command::Train(a) => commands::train_cmd(a),
        Command::Eval(a) => commands::eval(a),
        Command::Count(a) => commands::count(a),
        Command::Simulate(a) => commands::simulate_cmd(a),
        Command::Compare(a) => commands::compare(a),
    }
}
