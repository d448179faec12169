//! Command-line driver for the captioning pipeline.
//!
//! Exit codes: 0 success, 1 failed check or failed run, 2 usage or
//! configuration error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Environment variable holding the worker-thread count.
pub const THREADS_ENV: &str = "NAIC_THREADS";

#[derive(Parser, Debug)]
#[command(name = "naic", version, about = "Non-autoregressive captioning with counterfactual multi-agent learning")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// TOML run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Overrides the run directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    None,
    Ma,
    Sc,
    Cf,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Print the effective configuration as TOML.
    ShowConfig,
    /// Generate the synthetic dataset into the run directory.
    GenerateData,
    /// Train the autoregressive teacher.
    TrainTeacher {
        /// Continue from the saved checkpoint and optimizer state.
        #[arg(long)]
        resume: bool,
    },
    /// Caption training and unlabeled images with the teacher.
    Distill {
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// XE pretraining of the non-autoregressive student.
    PretrainXe {
        /// Initialise the student from the teacher's weights.
        #[arg(long)]
        weight_init: bool,
        #[arg(long)]
        resume: bool,
    },
    /// Fine-tune the XE student with multi-agent policy gradients.
    TrainCmal {
        #[arg(long, value_enum)]
        baseline: Option<BaselineArg>,
        /// Top-k size of the counterfactual baseline.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        resume: bool,
    },
    /// Caption-quality metrics of a checkpoint on one split.
    Evaluate {
        /// `teacher`, `xe`, `cmal`, or a checkpoint path.
        #[arg(long, default_value = "cmal")]
        checkpoint: String,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Single-image decoding latency of the student against the teacher.
    BenchLatency {
        #[arg(long, default_value = "cmal")]
        student: String,
        #[arg(long, default_value = "teacher")]
        teacher: String,
        #[arg(long)]
        num_images: Option<usize>,
        #[arg(long)]
        beam_width: Option<usize>,
    },
    /// Exact-enumeration check that every baseline leaves the policy
    /// gradient unbiased.
    OracleCheck {
        /// Deliberately flip the advantage sign; the check must fail.
        #[arg(long)]
        inject_sign_flip: bool,
        /// Random models per agent count.
        #[arg(long, default_value_t = 3)]
        models: u64,
    },
}

fn configure_threads() -> Result<(), String> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = value
        .parse()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| format!("{THREADS_ENV} must be a positive integer, got {value:?}"))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    match commands::run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(commands::exit_code(&e))
        }
    }
}
