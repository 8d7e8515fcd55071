//! `rulkit`: remaining-useful-life prognostics from the command line.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "rulkit", version, about = "Remaining-useful-life prognostics on C-MAPSS style data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic run-to-failure corpus in C-MAPSS text format.
    Generate(GenerateArgs),
    /// Select sensors, label, scale and window a train/test corpus.
    Preprocess(PreprocessArgs),
    /// Train the regressor on preprocessed windows.
    Train(TrainArgs),
    /// Score a checkpoint on the preprocessed test windows.
    Evaluate(EvaluateArgs),
    /// Export attention, residual, correlation and RUL-profile tables.
    Explain(ExplainArgs),
}

#[derive(Args)]
pub struct GenerateArgs {
    /// Directory for train.txt, test.txt and RUL.txt.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 100)]
    pub engines: usize,
    #[arg(long, default_value_t = 128)]
    pub min_life: u32,
    #[arg(long, default_value_t = 362)]
    pub max_life: u32,
    /// Number of sensors held constant.
    #[arg(long, default_value_t = 7)]
    pub constant_sensors: usize,
    /// Standard deviation of the sensor noise.
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    /// Exponent p of the health index 1 - (t/L)^p.
    #[arg(long, default_value_t = 2.0)]
    pub exponent: f64,
    #[arg(long, default_value_t = 42)]
    pub seed: u64,
}

#[derive(Args)]
pub struct PreprocessArgs {
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub test: PathBuf,
    /// Terminal RUL of each test engine, one integer per line.
    #[arg(long)]
    pub truth: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = rulkit_core::pipeline::WINDOW_LEN)]
    pub window: usize,
    #[arg(long, default_value_t = rulkit_core::pipeline::TRAIN_STRIDE)]
    pub stride: usize,
    #[arg(long, default_value_t = rulkit_core::pipeline::MAX_RUL)]
    pub max_rul: f64,
    /// Sensors whose (max - min) over the training corpus is at most this are dropped.
    #[arg(long, default_value_t = rulkit_core::pipeline::DEFAULT_VARIANCE_THRESHOLD)]
    pub variance_threshold: f64,
    /// Explicit 1-based sensors to drop, e.g. `1,5,6,10,16,18,19`; replaces the threshold scan.
    #[arg(long, value_delimiter = ',')]
    pub drop_sensors: Option<Vec<usize>>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModelSize {
    /// 64/128 filters, 128 LSTM units per direction.
    Standard,
    /// 16/32 filters, 32 LSTM units per direction.
    Reduced,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ObjectiveKind {
    Asymmetric,
    Squared,
}

/// Every `TrainConfig` field; unset flags fall back to the config file, then the defaults.
#[derive(Args, Default)]
pub struct TrainFlags {
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub clipnorm: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
    #[arg(long)]
    pub early_stop_patience: Option<usize>,
    #[arg(long)]
    pub lr_factor: Option<f64>,
    #[arg(long)]
    pub lr_patience: Option<usize>,
    #[arg(long)]
    pub min_learning_rate: Option<f64>,
    #[arg(long)]
    pub min_delta: Option<f64>,
    #[arg(long)]
    pub l2_lambda: Option<f64>,
    #[arg(long)]
    pub val_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `engine` or `window`.
    #[arg(long)]
    pub split_mode: Option<String>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Output directory of `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for model.ckpt, history.csv and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Flat `key = value` file with TrainConfig fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelSize::Standard)]
    pub model: ModelSize,
    #[arg(long, value_enum, default_value_t = ObjectiveKind::Asymmetric)]
    pub objective: ObjectiveKind,
    /// Under-estimation coefficient of the asymmetric loss.
    #[arg(long, default_value_t = 13.0)]
    pub h1: f64,
    /// Over-estimation coefficient of the asymmetric loss.
    #[arg(long, default_value_t = 10.0)]
    pub h2: f64,
    /// Suppress per-epoch progress on stderr.
    #[arg(long)]
    pub quiet: bool,
    #[command(flatten)]
    pub flags: TrainFlags,
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory of `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Directory for metrics.txt, metrics.json, predictions.csv and manifest.json.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 13.0)]
    pub h1: f64,
    #[arg(long, default_value_t = 10.0)]
    pub h2: f64,
}

#[derive(Args)]
pub struct ExplainArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory of `preprocess`.
    #[arg(long)]
    pub data: PathBuf,
    /// Raw training trajectories, for the correlation and RUL-profile tables.
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Engine ids for the attention and profile tables. Defaults to the
    /// first five test engines and the first six training engines.
    #[arg(long, value_delimiter = ',')]
    pub units: Option<Vec<u32>>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Generate(a) => commands::generate(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Explain(a) => commands::explain(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
