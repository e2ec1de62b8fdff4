mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use avlae::data::DataError;
use avlae::metrics::MetricError;
use avlae::tensor::TensorError;
use avlae::training::TrainError;
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug)]
pub enum CliError {
    /// Bad input from the caller: exit code 1.
    User(String),
    /// Failure while running: exit code 2.
    Runtime(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::User(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::User(m) | CliError::Runtime(m) => m,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Io { .. } | DataError::Image { .. } => CliError::Runtime(e.to_string()),
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Data(d) => d.into(),
            TrainError::NonFinite { .. } | TrainError::Tensor(_) | TrainError::Observer(_) => {
                CliError::Runtime(e.to_string())
            }
            _ => CliError::User(e.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<MetricError> for CliError {
    fn from(e: MetricError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(name = "avlae", version, about = "Train and inspect adversarial video latent autoencoders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and write checkpoints and step logs.
    Train(TrainArgs),
    /// Generate videos from random latents.
    Sample(SampleArgs),
    /// Generate pairs that share one latent and differ in the other.
    Swap(SwapArgs),
    /// Re-encode a real video and regenerate it.
    Reconstruct(ReconstructArgs),
    /// Print FID, IS and disentanglement statistics as JSON.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub log_every: Option<u64>,
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Continue from this checkpoint up to the configured step budget.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Accept a checkpoint whose config fingerprint differs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct ModelArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `config.json` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct SampleArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 16)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum SwapMode {
    FixAppearance,
    FixMotion,
}

#[derive(Args, Debug)]
pub struct SwapArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, value_enum)]
    pub mode: SwapMode,
    #[arg(long, default_value_t = 4)]
    pub n: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct ReconstructArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    /// An `.avt` video or a directory of frame images.
    #[arg(long)]
    pub input: PathBuf,
    /// 1-based index of the frame fed to the appearance encoder.
    #[arg(long, default_value_t = 1)]
    pub frame: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 2560)]
    pub extractor_videos: usize,
    #[arg(long, default_value_t = 64)]
    pub probe_pairs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Sample(a) => commands::sample(a),
        Command::Swap(a) => commands::swap(a),
        Command::Reconstruct(a) => commands::reconstruct(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.exit_code())
        }
    }
}
