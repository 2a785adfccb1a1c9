use std::path::PathBuf;

use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use runtime_oracle::evaluation::{InterferenceMode, Objective};
use runtime_oracle::model::Activation;

#[derive(Parser, Debug)]
#[command(
    name = "runtime-oracle",
    version,
    about = "Interference-aware runtime prediction with calibrated upper bounds",
    args_override_self = true
)]
pub struct Cli {
    /// TOML config file; command-line flags override its values
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset from planted parameters
    Synth(SynthArgs),
    /// Partition a dataset into train, calval and test sets
    Split(SplitArgs),
    /// Fit the baseline and train one model
    Train(TrainArgs),
    /// Build conformal offsets for a quantile-mode model
    Calibrate(CalibrateArgs),
    /// Score a trained model, or run the fraction x replicate grid
    Evaluate(EvaluateArgs),
    /// Aggregate replicate reports into tables
    Summarize(SummarizeArgs),
    /// Write learned embeddings and interference norms as CSV
    ExportEmbeddings(ExportArgs),
}

fn non_negative(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v >= 0.0 && v.is_finite() {
        Ok(v)
    } else {
        Err(format!("must be finite and >= 0, got {v}"))
    }
}

fn open_unit(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0.0 && v < 1.0 {
        Ok(v)
    } else {
        Err(format!("must lie in (0, 1), got {v}"))
    }
}

fn positive(s: &str) -> Result<usize, String> {
    let v: usize = s.parse().map_err(|e| format!("{e}"))?;
    if v > 0 {
        Ok(v)
    } else {
        Err("must be at least 1".to_string())
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum FormatArg {
    Jsonl,
    Csv,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    Mean,
    Quantile,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectiveArg {
    LogResidual,
    Log,
    Proportional,
}

impl From<ObjectiveArg> for Objective {
    fn from(v: ObjectiveArg) -> Self {
        match v {
            ObjectiveArg::LogResidual => Objective::LogResidual,
            ObjectiveArg::Log => Objective::Log,
            ObjectiveArg::Proportional => Objective::Proportional,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum InterferenceArg {
    Model,
    Discard,
    Ignore,
}

impl From<InterferenceArg> for InterferenceMode {
    fn from(v: InterferenceArg) -> Self {
        match v {
            InterferenceArg::Model => InterferenceMode::Model,
            InterferenceArg::Discard => InterferenceMode::Discard,
            InterferenceArg::Ignore => InterferenceMode::Ignore,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationArg {
    LeakyRelu,
    Identity,
}

impl From<ActivationArg> for Activation {
    fn from(v: ActivationArg) -> Self {
        match v {
            ActivationArg::LeakyRelu => Activation::LeakyRelu,
            ActivationArg::Identity => Activation::Identity,
        }
    }
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output dataset directory
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Random seed [fallback: RUNTIME_ORACLE_SEED, then 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value_t = 30, value_parser = positive)]
    pub n_workloads: usize,
    #[arg(long, default_value_t = 15, value_parser = positive)]
    pub n_platforms: usize,
    /// Raw opcode counters per workload
    #[arg(long, default_value_t = 16, value_parser = positive)]
    pub workload_dim: usize,
    #[arg(long, default_value_t = 16, value_parser = positive)]
    pub platform_dim: usize,
    /// Rank of the planted residual factors
    #[arg(long, default_value_t = 4, value_parser = positive)]
    pub rank: usize,
    /// Planted interference types
    #[arg(long, default_value_t = 1)]
    pub interference_types: usize,
    /// Std-dev of the log-space runtime noise
    #[arg(long, default_value_t = 0.02, value_parser = non_negative, allow_negative_numbers = true)]
    pub noise_sigma: f64,
    /// Observations per interference degree 0..=3
    #[arg(long, default_value_t = 400, value_parser = positive)]
    pub obs_per_mode: usize,
    /// Scale of the planted interference factors
    #[arg(long, default_value_t = 0.1, value_parser = non_negative, allow_negative_numbers = true)]
    pub interference_scale: f64,
    /// Negative-side slope of the planted activation
    #[arg(long, default_value_t = 0.1, value_parser = open_unit, allow_negative_numbers = true)]
    pub leaky_slope: f64,
    /// Std-dev of the noise on feature probes
    #[arg(long, default_value_t = 0.1, value_parser = non_negative, allow_negative_numbers = true)]
    pub feature_noise: f64,
    #[arg(long, value_enum, default_value_t = FormatArg::Jsonl)]
    pub format: FormatArg,
}

#[derive(Args, Debug)]
pub struct SplitArgs {
    /// Dataset directory
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Output directory for split.json
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Share of observations used for training and calibration
    #[arg(long, default_value_t = 0.5, value_parser = open_unit, allow_negative_numbers = true)]
    pub train_fraction: f64,
    /// Random seed [fallback: RUNTIME_ORACLE_SEED, then 0]
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Architecture, optimizer and objective shared by `train` and grid evaluation.
#[derive(Args, Debug)]
pub struct ModelArgs {
    /// Hidden layer widths of both towers
    #[arg(long, value_delimiter = ',', default_values_t = [128, 128], value_parser = positive)]
    pub hidden_sizes: Vec<usize>,
    /// Embedding dimension
    #[arg(long, default_value_t = 32, value_parser = positive)]
    pub embed_dim: usize,
    /// Learned features appended to the side information
    #[arg(long, default_value_t = 1)]
    pub learned_features: usize,
    /// Interference types
    #[arg(long, default_value_t = 2)]
    pub interference_types: usize,
    /// Target quantiles of the quantile heads
    #[arg(
        long,
        value_delimiter = ',',
        default_values_t = [0.5, 0.6, 0.7, 0.8, 0.9, 0.95, 0.98, 0.99],
        value_parser = open_unit
    )]
    pub quantiles: Vec<f64>,
    /// Interference activation
    #[arg(long, value_enum, default_value_t = ActivationArg::LeakyRelu)]
    pub activation: ActivationArg,
    #[arg(long, default_value_t = 0.1, value_parser = open_unit, allow_negative_numbers = true)]
    pub leaky_slope: f64,
    /// Optimizer steps
    #[arg(long, default_value_t = 20_000)]
    pub steps: usize,
    /// Samples per interference degree per step
    #[arg(long, default_value_t = 512, value_parser = positive)]
    pub batch_per_mode: usize,
    /// Steps between validation checks
    #[arg(long, default_value_t = 200, value_parser = positive)]
    pub eval_every: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 0.9)]
    pub beta1: f64,
    #[arg(long, default_value_t = 0.999)]
    pub beta2: f64,
    /// Total loss weight of the interference degrees 1..=3
    #[arg(long, default_value_t = 0.5, value_parser = non_negative, allow_negative_numbers = true)]
    pub interference_weight: f64,
    #[arg(long, value_enum, default_value_t = ObjectiveArg::LogResidual)]
    pub objective: ObjectiveArg,
    /// Feed workload features to the workload tower (one-hot ids otherwise)
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub workload_features: bool,
    /// Feed platform features to the platform tower (one-hot ids otherwise)
    #[arg(long, default_value_t = true, action = ArgAction::Set)]
    pub platform_features: bool,
    /// How training treats observations with interferers
    #[arg(long, value_enum, default_value_t = InterferenceArg::Model)]
    pub interference: InterferenceArg,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// split.json produced by `split`
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Single squared-loss head, or one pinball head per quantile
    #[arg(long, value_enum, default_value_t = ModeArg::Quantile)]
    pub mode: ModeArg,
    /// Random seed [fallback: RUNTIME_ORACLE_SEED, then 0]
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub model: ModelArgs,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    /// Quantile-mode checkpoint
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Miscoverage rates to calibrate
    #[arg(
        long,
        value_delimiter = ',',
        default_values_t = [0.1, 0.09, 0.08, 0.07, 0.06, 0.05, 0.04, 0.03, 0.02, 0.01],
        value_parser = open_unit
    )]
    pub epsilon: Vec<f64>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint to score; without it the full experiment grid runs
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Calibration table, required for quantile-mode checkpoints
    #[arg(long, value_name = "FILE")]
    pub calibration: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    /// Split whose test set is scored (checkpoint mode)
    #[arg(long, value_name = "FILE")]
    pub split: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Miscoverage rates [default: every calibrated rate, or 0.1,0.09,...,0.01 for the grid]
    #[arg(long, value_delimiter = ',', value_parser = open_unit)]
    pub epsilon: Option<Vec<f64>>,

    /// Worker threads for the grid
    #[arg(long, default_value_t = 1, value_parser = positive, help_heading = "Grid")]
    pub jobs: usize,
    /// Training fractions of the grid
    #[arg(
        long,
        value_delimiter = ',',
        default_values_t = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9],
        value_parser = open_unit,
        help_heading = "Grid"
    )]
    pub fractions: Vec<f64>,
    #[arg(long, default_value_t = 5, value_parser = positive, help_heading = "Grid")]
    pub replicates: usize,
    /// Label carried into reports and summary tables
    #[arg(long, default_value = "default", help_heading = "Grid")]
    pub label: String,
    /// Train the single-head model used for MAPE
    #[arg(long, default_value_t = true, action = ArgAction::Set, help_heading = "Grid")]
    pub mean_model: bool,
    /// Train the quantile model used for bounds
    #[arg(long, default_value_t = true, action = ArgAction::Set, help_heading = "Grid")]
    pub quantile_model: bool,
    /// Base seed; replicate r uses seed + r [fallback: RUNTIME_ORACLE_SEED, then 0]
    #[arg(long, help_heading = "Grid")]
    pub seed: Option<u64>,
    #[command(flatten, next_help_heading = "Grid model")]
    pub model_args: ModelArgs,
}

#[derive(Args, Debug)]
pub struct SummarizeArgs {
    /// Run directories holding report.json, or parents of such directories
    #[arg(required = true, value_name = "RUN_DIR")]
    pub runs: Vec<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ExportArgs {
    #[arg(long, value_name = "FILE")]
    pub model: Option<PathBuf>,
    /// Dataset whose entity names label the rows
    #[arg(long, value_name = "DIR")]
    pub data: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}
