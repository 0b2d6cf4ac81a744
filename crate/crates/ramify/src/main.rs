//! `ramify` command-line frontend.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 when a
//! numerical assertion fails, 1 for any other error.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ramify::config::{Experiment, Overrides, RunConfig};
use ramify::experiments::run_experiment;
use ramify::mollified::Functional;
use ramify::RamifyError;

#[derive(Parser)]
#[command(name = "ramify", version, about = "Mollified branched-transport experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Irrigate equal masses on a half circle from a star of paths.
    Irrigate(CommonArgs),
    /// Optimize tree shape and leaf density from a fan of branches.
    Treeopt(CommonArgs),
    /// Tabulate exact and mollified energies over a grid of eps.
    GammaTable(CommonArgs),
    /// Evaluate the lower-semicontinuity counterexample.
    Counterexample(CommonArgs),
    /// Compare analytic and finite-difference gradients on random plans.
    Gradcheck(CommonArgs),
}

#[derive(Args)]
struct CommonArgs {
    /// JSON config file, merged over the preset.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Embedded preset: fig2, fig3, fig3-text, fig4 or fig5.
    #[arg(long)]
    preset: Option<String>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Path-plan functional.
    #[arg(long, value_parser = parse_functional)]
    functional: Option<Functional>,
}

fn parse_functional(s: &str) -> Result<Functional, String> {
    s.parse().map_err(|e: RamifyError| e.to_string())
}

fn init_threads() -> Result<(), RamifyError> {
    let Ok(raw) = std::env::var("RAMIFY_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .map_err(|_| RamifyError::Config(format!("RAMIFY_THREADS must be a nonnegative integer, got '{raw}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| RamifyError::Config(format!("cannot configure thread pool: {e}")))
}

fn run(cli: Cli) -> Result<ExitCode, RamifyError> {
    init_threads()?;
    let (experiment, args) = match cli.command {
        Command::Irrigate(a) => (Experiment::Irrigate, a),
        Command::Treeopt(a) => (Experiment::Treeopt, a),
        Command::GammaTable(a) => (Experiment::GammaTable, a),
        Command::Counterexample(a) => (Experiment::Counterexample, a),
        Command::Gradcheck(a) => (Experiment::Gradcheck, a),
    };
    let overrides = Overrides { output_dir: args.out, functional: args.functional };
    let cfg = RunConfig::assemble(args.preset.as_deref(), args.config.as_deref(), &overrides)?;
    let outcome = run_experiment(experiment, &cfg)?;
    println!("{}", serde_json::to_string_pretty(&outcome.summary).expect("summary serializes"));
    if outcome.passed() {
        Ok(ExitCode::SUCCESS)
    } else {
        for f in &outcome.failures {
            eprintln!("assertion failed: {f}");
        }
        Ok(ExitCode::from(3))
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                RamifyError::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
