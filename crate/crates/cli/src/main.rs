//! `mbsaem`: simulate datasets, fit models and run replicated experiments
//! with the mini-batch MCMC-SAEM algorithm.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "mbsaem", version, about = "Mini-batch MCMC-SAEM for latent variable models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModelId {
    Sbm,
    Pk,
    Frailty,
}

impl ModelId {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelId::Sbm => "sbm",
            ModelId::Pk => "pk",
            ModelId::Frailty => "frailty",
        }
    }

    pub fn parse(s: &str) -> Result<Self, CliError> {
        <Self as ValueEnum>::from_str(s, true).map_err(|_| CliError::usage(format!("unknown model `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ExperimentKind {
    EpochConvergence,
    VarianceScaling,
    Timing,
    NlkPmf,
}

impl ExperimentKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ExperimentKind::EpochConvergence => "epoch-convergence",
            ExperimentKind::VarianceScaling => "variance-scaling",
            ExperimentKind::Timing => "timing",
            ExperimentKind::NlkPmf => "nlk-pmf",
        }
    }
}

/// Flags shared by every subcommand. Each one overrides the matching key of
/// the `--config` file.
#[derive(Args, Clone, Debug, Default)]
pub struct RunArgs {
    /// TOML config file, or the manifest of an earlier run.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "model", value_enum)]
    pub model: Option<ModelId>,
    /// Mini-batch proportion.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub iters: Option<usize>,
    /// Base seed; falls back to MBSAEM_SEED.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Iterations with step size 1.
    #[arg(long = "schedule-burnin")]
    pub schedule_burnin: Option<usize>,
    /// Decay exponent of the step size after burn-in.
    #[arg(long = "schedule-exp")]
    pub schedule_exp: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub replicates: Option<usize>,
    #[arg(long = "alpha-grid", value_delimiter = ',')]
    pub alpha_grid: Option<Vec<f64>>,
    /// Reuse a non-empty output directory.
    #[arg(long)]
    pub force: bool,
    /// Worker threads for replicated experiments.
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct DesignArgs {
    /// Number of latent components (nodes, individuals, groups).
    #[arg(long)]
    pub n: Option<usize>,
    /// SBM blocks.
    #[arg(long)]
    pub q: Option<usize>,
    /// Frailty group size.
    #[arg(long)]
    pub m: Option<usize>,
    /// PK observations per individual.
    #[arg(long)]
    pub j: Option<usize>,
    /// Generating parameter vector, in trace column order.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub theta: Option<Vec<f64>>,
}

#[derive(Args, Clone, Debug, Default)]
pub struct ExperimentArgs {
    /// Horizon in epochs (epoch-convergence).
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Graph sizes (timing).
    #[arg(long, value_delimiter = ',')]
    pub sizes: Option<Vec<usize>>,
    /// Timed SAE-steps per chain (timing, at least 100).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Discarded SAE-steps per chain (timing).
    #[arg(long)]
    pub warmup: Option<usize>,
    /// k - l for the pmf test (nlk-pmf).
    #[arg(long)]
    pub gap: Option<usize>,
    /// Draws for the pmf test (nlk-pmf).
    #[arg(long)]
    pub draws: Option<usize>,
    /// Window length k for the sum rule (nlk-pmf).
    #[arg(long)]
    pub window: Option<usize>,
    /// Number of windows (nlk-pmf).
    #[arg(long)]
    pub windows: Option<usize>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate a dataset and its ground truth.
    Simulate {
        #[arg(value_enum, id = "model_pos", value_name = "MODEL")]
        model: Option<ModelId>,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Fit one model and write the trace and the final estimate.
    Fit {
        #[arg(value_enum, id = "model_pos", value_name = "MODEL")]
        model: Option<ModelId>,
        /// Dataset file; without it a dataset is simulated from the seed.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Initial parameter vector, in trace column order.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        init: Option<Vec<f64>>,
        /// Record every thin-th iteration.
        #[arg(long)]
        thin: Option<usize>,
        /// Keep wall-clock columns in the trace.
        #[arg(long)]
        timing: bool,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        design: DesignArgs,
    },
    /// Replicated experiment over an alpha grid.
    Experiment {
        #[arg(value_enum)]
        kind: ExperimentKind,
        #[command(flatten)]
        run: RunArgs,
        #[command(flatten)]
        design: DesignArgs,
        #[command(flatten)]
        exp: ExperimentArgs,
    },
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { model, run, design } => {
            commands::init_threads(run.threads)?;
            commands::simulate(model, &run, &design)
        }
        Command::Fit {
            model,
            data,
            init,
            thin,
            timing,
            run,
            design,
        } => {
            commands::init_threads(run.threads)?;
            let fit = commands::FitArgs {
                data,
                init,
                thin,
                timing,
            };
            commands::fit(model, &fit, &run, &design)
        }
        Command::Experiment { kind, run, design, exp } => {
            commands::init_threads(run.threads)?;
            commands::experiment(kind, &run, &design, &exp)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
