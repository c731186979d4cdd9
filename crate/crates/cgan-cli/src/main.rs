//! Command-line driver: simulate cohorts, train the adversarial weighting
//! model, extract weights, evaluate effect and balance reports, and run the
//! built-in numerical oracle suites.
//!
//! Exit codes: 0 success, 2 usage error, 3 data validation error,
//! 4 numerical failure.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;

#[derive(Parser)]
#[command(name = "cgan", version, about = "Counterfactual chi-squared GAN weighting pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate two synthetic cohorts from normal-Wishart subpopulations.
    Simulate(SimulateArgs),
    /// Train the adversarial model on two or more cohort CSVs.
    Train(TrainArgs),
    /// Extract importance weights for a cohort from a trained checkpoint.
    Weigh(WeighArgs),
    /// Compute effect (ATE/ESS) and balance (ASDM) reports.
    Evaluate(EvaluateArgs),
    /// Run a built-in numerical oracle suite and print measured vs expected.
    Oracle(OracleArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Feature dimension.
    #[arg(long, default_value_t = 10)]
    d: usize,
    /// Units per subpopulation (each arm holds 2x this).
    #[arg(long, default_value_t = 2000)]
    n_per_subpop: usize,
    /// Prior precision scale for the subpopulation means.
    #[arg(long, default_value_t = 0.1)]
    kappa0: f64,
    /// Wishart degrees of freedom; defaults to d + 2.
    #[arg(long)]
    nu0: Option<f64>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct TrainArgs {
    /// Cohort CSV files (at least two).
    #[arg(long, required = true, num_args = 2..)]
    cohorts: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 256)]
    batch_size: usize,
    #[arg(long, default_value_t = 20000)]
    max_iters: usize,
    #[arg(long, default_value_t = 1)]
    disc_steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr_gen: f64,
    #[arg(long, default_value_t = 2e-4)]
    lr_disc: f64,
    #[arg(long, default_value_t = 0.95)]
    lr_decay: f64,
    #[arg(long, default_value_t = 500)]
    recenter_period: usize,
    #[arg(long, default_value_t = 500)]
    convergence_window: usize,
    #[arg(long, default_value_t = 1e-4)]
    convergence_tol: f64,
    #[arg(long, default_value_t = 16)]
    noise_dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct WeighArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Cohort CSV to weigh.
    #[arg(long)]
    cohort: PathBuf,
    /// Which arm's critic to use (0-based, matching training order).
    #[arg(long)]
    arm_index: usize,
    /// Output weights CSV path.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Exactly two cohort CSVs: treatment then comparator.
    #[arg(long, required = true, num_args = 2)]
    cohorts: Vec<PathBuf>,
    /// Weights CSVs matching the cohorts (one per cohort). Omit when using
    /// --method unweighted/ipw/clipped-ipw.
    #[arg(long, num_args = 2)]
    weights: Option<Vec<PathBuf>>,
    /// Weighting method to compute in-process.
    #[arg(long, value_parser = ["unweighted", "ipw", "clipped-ipw", "cgan"])]
    method: Option<String>,
    /// Checkpoint path, required for --method cgan.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    /// Suite name: gaussian-chi2, identity, or variance-relation.
    suite: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate(args) => commands::simulate(args),
        Command::Train(args) => commands::train(args),
        Command::Weigh(args) => commands::weigh(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Oracle(args) => commands::oracle(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(commands::exit_code(&err))
        }
    }
}
