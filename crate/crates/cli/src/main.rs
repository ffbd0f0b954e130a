use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use nloc_fp_core::{load_config, run, Command, Error, RunOptions};

const EXIT_CONFIG: u8 = 2;
const EXIT_SOLVER: u8 = 3;
const EXIT_TOLERANCE: u8 = 4;

#[derive(Parser)]
#[command(
    version,
    about = "Optimal control of Fokker-Planck equations with nonlocal control action"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Subcommand)]
enum Sub {
    /// Run the forward-backward sweep and write the optimal control.
    Solve(Opts),
    /// Solve, then cross-check the optimum against Euler–Maruyama paths.
    McCompare(Opts),
    /// Compare adjoint and finite-difference directional derivatives at the initial control.
    GradCheck(Opts),
    /// Evolve the density under the initial control only.
    ForwardOnly(Opts),
}

#[derive(Args)]
struct Opts {
    /// Scenario file (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for the report and CSV artifacts.
    #[arg(long)]
    out: PathBuf,
    /// Override the Monte-Carlo seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    threads: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    if e.is_config() {
        EXIT_CONFIG
    } else {
        EXIT_SOLVER
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, opts) = match cli.command {
        Sub::Solve(o) => (Command::Solve, o),
        Sub::McCompare(o) => (Command::McCompare, o),
        Sub::GradCheck(o) => (Command::GradCheck, o),
        Sub::ForwardOnly(o) => (Command::ForwardOnly, o),
    };
    let scenario = match load_config(&opts.config) {
        Ok(s) => s,
        Err(e) => {
            error!("{}: {e}", opts.config.display());
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = opts.threads {
        pool = pool.num_threads(n);
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            error!("cannot start thread pool: {e}");
            return ExitCode::from(EXIT_CONFIG);
        }
    };
    let options = RunOptions { seed: opts.seed };
    match pool.install(|| run(&scenario, command, &opts.out, &options)) {
        Ok(report) if !report.within_tolerance() => ExitCode::from(EXIT_TOLERANCE),
        Ok(_) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{command}: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
