use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use geolevy::cli::{load_config, run_config, Command, Overrides};
use geolevy::Error;

/// Simulation and verification toolkit for sums of geometric Lévy processes.
#[derive(Debug, Parser)]
#[command(name = "geolevy", version)]
struct Args {
    #[command(subcommand)]
    command: Sub,

    /// Configuration file, or inline JSON starting with `{`.
    #[arg(long, global = true)]
    config: Option<String>,

    /// Root seed; overrides the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads. Results do not depend on this value.
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Cap on simulated samples (N·R·|grid| for ensembles).
    #[arg(long, global = true)]
    budget: Option<u64>,

    /// Restricts `verify` to the named checks (repeatable).
    #[arg(long, global = true)]
    check: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Sub {
    /// Regime of a model under a growth rule.
    Classify,
    /// Rate function, its inverse, and stable indices.
    Rate,
    /// Ensemble simulation of the normalized sums.
    Simulate,
    /// Paths of a limit process.
    LimitSample,
    /// Statistical and asymptotic checks.
    Verify,
    /// Random energy model preset.
    RemPreset,
    /// Runs the command named in the configuration.
    Run,
}

fn fail(e: &Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(e.exit_code() as u8)
}

fn main() -> ExitCode {
    let args = Args::parse();
    let command = match args.command {
        Sub::Classify => Some(Command::Classify),
        Sub::Rate => Some(Command::Rate),
        Sub::Simulate => Some(Command::Simulate),
        Sub::LimitSample => Some(Command::LimitSample),
        Sub::Verify => Some(Command::Verify),
        Sub::RemPreset => Some(Command::RemPreset),
        Sub::Run => None,
    };
    let Some(config_arg) = args.config.as_deref() else {
        return fail(&Error::Schema("--config is required".into()));
    };
    let mut cfg = match load_config(config_arg) {
        Ok(c) => c,
        Err(e) => return fail(&e),
    };
    let overrides = Overrides {
        command,
        seed: args.seed,
        out: args.out,
        budget: args.budget,
        checks: args.check,
    };
    if cfg.resolve(&overrides) {
        eprintln!("generated seed: {}", cfg.seed.expect("seed resolved"));
    }
    let pool = match rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads.unwrap_or(0))
        .build()
    {
        Ok(p) => p,
        Err(e) => return fail(&Error::Config(format!("thread pool: {e}"))),
    };
    match pool.install(|| run_config(&cfg)) {
        Ok(outcome) => {
            match serde_json::to_string_pretty(&outcome) {
                Ok(text) => println!("{text}"),
                Err(e) => return fail(&e.into()),
            }
            ExitCode::from(outcome.exit_code() as u8)
        }
        Err(e) => fail(&e),
    }
}
