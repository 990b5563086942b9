mod commands;
mod overlay;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use avtenet::ensemble::{EnsembleError, Strategy};
use avtenet::harness::HarnessError;
use avtenet::nets::{ModelKind, NetError};
use avtenet::synthdata::SynthError;
use avtenet::tensor::CheckpointError;

pub mod exit {
    pub const VERIFY: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const IO: u8 = 3;
    pub const EMPTY: u8 = 4;
    pub const DIVERGED: u8 = 5;
    pub const MISMATCH: u8 = 6;
}

/// A failed command: message plus process exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub message: String,
}

impl Failure {
    pub fn new(code: u8, message: impl Into<String>) -> Self {
        Self {
            code,
            message: message.into(),
        }
    }

    pub fn usage(m: impl Into<String>) -> Self {
        Self::new(exit::USAGE, m)
    }

    pub fn io(m: impl Into<String>) -> Self {
        Self::new(exit::IO, m)
    }

    pub fn mismatch(m: impl Into<String>) -> Self {
        Self::new(exit::MISMATCH, m)
    }
}

impl From<CheckpointError> for Failure {
    fn from(e: CheckpointError) -> Self {
        Failure::io(e.to_string())
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        let code = match e {
            SynthError::Config(_) => exit::USAGE,
            _ => exit::IO,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<NetError> for Failure {
    fn from(e: NetError) -> Self {
        let code = match e {
            NetError::Checkpoint(_) => exit::MISMATCH,
            NetError::Config(_) => exit::USAGE,
            NetError::Tensor(_) => exit::DIVERGED,
            _ => exit::IO,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<EnsembleError> for Failure {
    fn from(e: EnsembleError) -> Self {
        let code = match e {
            EnsembleError::NothingToTrain(_) => exit::USAGE,
            EnsembleError::Tensor(_) => exit::DIVERGED,
            _ => exit::MISMATCH,
        };
        Failure::new(code, e.to_string())
    }
}

impl From<HarnessError> for Failure {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::EmptyTrainingSet => Failure::new(exit::EMPTY, e.to_string()),
            HarnessError::NonFinite { .. } => Failure::new(exit::DIVERGED, e.to_string()),
            HarnessError::Config(_) | HarnessError::UnknownSubset(_) | HarnessError::Input(_) => {
                Failure::usage(e.to_string())
            }
            HarnessError::Mismatch(_) => Failure::mismatch(e.to_string()),
            HarnessError::Net(e) => e.into(),
            HarnessError::Synth(e) => e.into(),
            HarnessError::Ensemble(e) => e.into(),
            HarnessError::Checkpoint(e) => e.into(),
            HarnessError::Tensor(t) => Failure::new(exit::DIVERGED, t.to_string()),
        }
    }
}

#[derive(Parser, Debug)]
#[command(name = "avtenet", version, about = "Audio-visual deepfake detection on a synthetic corpus")]
struct Cli {
    /// key=value file supplying defaults for flags ('#' starts a comment)
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker threads for data generation and evaluation
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic train and test corpus
    GenData(GenDataArgs),
    /// Train one classifier
    Train(TrainArgs),
    /// Train a score- or feature-fusion head over frozen components
    TrainEnsemble(TrainEnsembleArgs),
    /// Evaluate a classifier or an ensemble on a test subset
    Eval(EvalArgs),
    /// Print parameter counts of a checkpoint
    Describe(DescribeArgs),
    /// Compare analytic and finite-difference gradients of a toy classifier
    Gradcheck(GradcheckArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Training clips per category, e.g. RvRa=10,RvFa=10,FvRa=10,FvFa=10
    #[arg(long)]
    pub counts: Option<String>,
    /// Genuine clips shared by the test subsets
    #[arg(long)]
    pub test_reals: Option<usize>,
    /// Fake clips per test subset (multiple of 6)
    #[arg(long)]
    pub test_fakes: Option<usize>,
    /// Replace existing train/ and test/ directories
    #[arg(long)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub network: ModelKind,
    /// Corpus root or training split directory
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct TrainEnsembleArgs {
    #[arg(long)]
    pub strategy: Strategy,
    /// VN, AN and AVN checkpoints, in that order
    #[arg(long, num_args = 3, value_name = "CKPT", required = true)]
    pub components: Vec<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("what").required(true).args(["model", "ensemble"]))]
pub struct EvalArgs {
    #[arg(long)]
    pub model: Option<ModelKind>,
    #[arg(long)]
    pub ensemble: Option<Strategy>,
    /// One checkpoint for --model; VN, AN and AVN checkpoints for --ensemble
    #[arg(long, num_args = 1..=3, value_name = "CKPT", required = true)]
    pub ckpt: Vec<PathBuf>,
    /// Fusion head written by train-ensemble (needed for sf and ff)
    #[arg(long)]
    pub head: Option<PathBuf>,
    /// Corpus root or test split directory
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub subset: Option<String>,
    #[arg(long, value_name = "PATH")]
    pub dump_embeddings: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub json: Option<PathBuf>,
    #[arg(long, value_name = "PATH")]
    pub md: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct DescribeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long)]
    pub network: ModelKind,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, hide = true)]
    pub sabotage_grad: bool,
}

fn run(cli: Cli) -> Result<(), Failure> {
    let overlay = overlay::Overlay::load(cli.config.as_deref())?;
    let jobs = overlay.pick(cli.jobs, "jobs")?.unwrap_or(1).max(1);
    match cli.command {
        Command::GenData(a) => commands::gen_data(a, &overlay, jobs),
        Command::Train(a) => commands::train(a, &overlay, jobs),
        Command::TrainEnsemble(a) => commands::train_ensemble(a, &overlay, jobs),
        Command::Eval(a) => commands::eval(a, &overlay, jobs),
        Command::Describe(a) => commands::describe(a),
        Command::Gradcheck(a) => commands::gradcheck(a, &overlay),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
