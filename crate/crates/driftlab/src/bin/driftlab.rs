//! Command-line front end for the tracer assimilation laboratory.

use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use driftlab::cli;

#[derive(Parser)]
#[command(
    name = "driftlab",
    version,
    about = "Two-layer flow simulation, tracer data generation, surrogate training, and assimilation benchmarking"
)]
struct Cli {
    /// JSON config file; built-in defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Dotted-key config override, e.g. --set qg.n=64; repeatable.
    /// Values parse as JSON, falling back to strings.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Master seed; overrides dataset.seed, model.seed, and ensemble.seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Directory for outputs; each subcommand writes its own subdirectory.
    #[arg(long, global = true, default_value = "out", value_name = "DIR")]
    out_dir: PathBuf,

    /// Worker-thread cap; overrides ensemble.threads. Results never depend
    /// on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the flow and record energy and enstrophy diagnostics.
    Simulate,
    /// Generate a tracer observation dataset.
    GenData,
    /// Train the surrogate on a dataset's training split.
    Train {
        /// Dataset directory from gen-data.
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
    },
    /// Filter observed tracer positions into flow estimates.
    Assimilate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        /// Weights file from train.
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
    },
    /// Roll the learned dynamics forward from an assimilated state.
    Forecast {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
        /// Split-relative record to forecast from.
        #[arg(long, default_value_t = 100)]
        start: usize,
        /// Forecast leads to score.
        #[arg(long, default_value_t = 10)]
        horizon: usize,
    },
    /// Score the surrogate and every baseline on one split.
    Evaluate {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
    },
    /// Compare per-step wall clock across methods and problem sizes.
    Bench {
        #[arg(long, value_name = "DIR")]
        data: PathBuf,
        #[arg(long, value_name = "FILE")]
        weights: PathBuf,
    },
}

fn run(cli: Cli) -> driftlab::Result<()> {
    let (cfg, canon) =
        cli::load_config(cli.config.as_deref(), &cli.set, cli.seed, cli.threads)?;
    let out = &cli.out_dir;
    match &cli.command {
        Command::Simulate => cli::cmd_simulate(&cfg, &canon, out),
        Command::GenData => cli::cmd_gen_data(&cfg, &canon, out),
        Command::Train { data } => cli::cmd_train(&cfg, &canon, out, data),
        Command::Assimilate { data, weights } => {
            cli::cmd_assimilate(&cfg, &canon, out, data, weights)
        }
        Command::Forecast { data, weights, start, horizon } => {
            cli::cmd_forecast(&cfg, &canon, out, data, weights, *start, *horizon)
        }
        Command::Evaluate { data, weights } => {
            cli::cmd_evaluate(&cfg, &canon, out, data, weights)
        }
        Command::Bench { data, weights } => cli::cmd_bench(&cfg, &canon, out, data, weights),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
