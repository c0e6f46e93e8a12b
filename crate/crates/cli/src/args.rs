use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rxpeer::SearchStrategy;

#[derive(Debug, Parser)]
#[command(name = "rxpeer", version, about = "Flag unusual radiotherapy prescriptions against a historical database")]
pub struct Cli {
    /// Progress notes on standard error.
    #[arg(short, long, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Normalize and filter a raw export into per-technique databases.
    Ingest(IngestArgs),
    /// Search detector parameters per technique.
    Train(TrainArgs),
    /// Score records against a historical database.
    Check(CheckArgs),
    /// Forge simulated anomalies from a historical database.
    Simulate(SimulateArgs),
    /// Metrics and rater consensus from labeled predictions.
    Evaluate(EvaluateArgs),
    /// Pairwise distance histograms per technique.
    Hist(HistArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Record CSV.
    #[arg(long)]
    pub input: PathBuf,

    /// Cohort configuration JSON; defaults to the thoracic configuration.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Restrict to one technique label (3D, IMRT, SBRT).
    #[arg(long)]
    pub technique: Option<String>,
}

#[derive(Debug, Args)]
pub struct GateArgs {
    /// `preset`, `none`, `quantile:LO,HI`, or a boundaries JSON file.
    #[arg(long, default_value = "preset")]
    pub boundaries: String,

    /// Alpha/beta in cGy for BED.
    #[arg(long, default_value_t = rxpeer::range::DEFAULT_ALPHA_BETA)]
    pub alpha_beta: f64,
}

#[derive(Debug, Args)]
pub struct ForgeArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Highest conditional count a forged feature combination may have.
    #[arg(long, default_value_t = 1)]
    pub rarity_threshold: usize,

    #[arg(long, default_value_t = 10)]
    pub swaps: usize,

    #[arg(long, default_value_t = 10)]
    pub mutations: usize,

    /// Technique relabels; donors are the other techniques in the input.
    #[arg(long, default_value_t = 0)]
    pub relabels: usize,
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Grid,
    Random,
    Adaptive,
}

impl From<StrategyArg> for SearchStrategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Grid => SearchStrategy::Grid,
            StrategyArg::Random => SearchStrategy::Random,
            StrategyArg::Adaptive => SearchStrategy::Adaptive,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,

    #[command(flatten)]
    pub gate: GateArgs,

    #[command(flatten)]
    pub forge: ForgeArgs,

    #[arg(long)]
    pub out: PathBuf,

    /// Parameter points evaluated per technique.
    #[arg(long, default_value_t = 100)]
    pub budget: usize,

    /// Resampled runs averaged per point.
    #[arg(long, default_value_t = 50)]
    pub runs: usize,

    #[arg(long, value_enum, default_value_t = StrategyArg::Adaptive)]
    pub strategy: StrategyArg,

    /// Normal records drawn per run.
    #[arg(long, default_value_t = 10)]
    pub sn: usize,

    /// Records withheld for run sampling; defaults to four times --sn.
    #[arg(long)]
    pub pool: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[command(flatten)]
    pub common: Common,

    #[command(flatten)]
    pub gate: GateArgs,

    /// Historical record CSV.
    #[arg(long)]
    pub db: PathBuf,

    /// Parameters JSON written by `train`.
    #[arg(long)]
    pub params: PathBuf,

    /// Verdict JSON lines file; standard output when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[command(flatten)]
    pub common: Common,

    #[command(flatten)]
    pub forge: ForgeArgs,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Prediction CSV with record_id, truth, prediction, source.
    #[arg(long)]
    pub input: PathBuf,

    /// Sources compared for consensus; defaults to every source except `model`.
    #[arg(long, value_delimiter = ',')]
    pub raters: Vec<String>,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct HistArgs {
    #[command(flatten)]
    pub common: Common,

    #[arg(long, default_value_t = 0.02)]
    pub bin_width: f64,

    #[arg(long)]
    pub out: PathBuf,
}
