mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use onesided::ErrorClass;

use commands::{
    CompleteArgs, EstimateArgs, EvaluateArgs, GenerateArgs, ImputeArgs, SensitivityArgs, SweepArgs,
};
use config::ConfigFile;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Lib(onesided::Error),
}

impl From<onesided::Error> for CliError {
    fn from(e: onesided::Error) -> Self {
        CliError::Lib(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Lib(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Lib(e) => match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Data => 3,
                ErrorClass::Numerical => 4,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Lib(e) => write!(f, "{e}"),
        }
    }
}

/// One-sided matrix completion: Hajek second-moment estimation, gradient
/// descent completion, imputation and the synthetic experiments.
#[derive(Debug, Parser)]
#[command(name = "onesided", version)]
struct Cli {
    /// Base seed for every random stream.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for Monte Carlo and sweeps.
    #[arg(long, global = true, env = "ONESIDED_MC_THREADS")]
    threads: Option<usize>,
    /// Directory for all outputs (created if missing).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// TOML or JSON file with global keys and one table per subcommand.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a synthetic model and an observation mask.
    Generate(GenerateArgs),
    /// Hajek or Horvitz-Thompson second-moment estimate of observed data.
    Estimate(EstimateArgs),
    /// Recover the full second moment with Hajek-GD or a baseline.
    Complete(CompleteArgs),
    /// Impute the missing entries of M from the recovered subspace.
    Impute(ImputeArgs),
    /// Score saved estimates against a ground truth or a holdout.
    Evaluate(EvaluateArgs),
    /// Run a seeded grid of synthetic experiments into a tidy CSV.
    Sweep(SweepArgs),
    /// Empirical output sensitivity and noise response of Hajek-GD.
    Sensitivity(SensitivityArgs),
}

pub struct Globals {
    pub seed: u64,
    pub out_dir: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let file = match &cli.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    let threads = match cli.threads {
        Some(t) => Some(t),
        None => file.global::<usize>("threads")?,
    };
    if let Some(t) = threads {
        if t == 0 {
            return Err(CliError::Usage("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;
    }
    let g = Globals {
        seed: match cli.seed {
            Some(s) => s,
            None => file.global("seed")?.unwrap_or(0),
        },
        out_dir: match cli.out_dir {
            Some(d) => d,
            None => file.global("out-dir")?.unwrap_or_else(|| PathBuf::from(".")),
        },
    };
    std::fs::create_dir_all(&g.out_dir)?;
    match cli.command {
        Command::Generate(a) => commands::generate(&g, file.merge("generate", &a)?),
        Command::Estimate(a) => commands::estimate(&g, file.merge("estimate", &a)?),
        Command::Complete(a) => commands::complete(&g, file.merge("complete", &a)?),
        Command::Impute(a) => commands::impute(&g, file.merge("impute", &a)?),
        Command::Evaluate(a) => commands::evaluate(&g, file.merge("evaluate", &a)?),
        Command::Sweep(a) => commands::sweep(&g, file.merge("sweep", &a)?),
        Command::Sensitivity(a) => commands::sensitivity(&g, file.merge("sensitivity", &a)?),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("onesided: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
