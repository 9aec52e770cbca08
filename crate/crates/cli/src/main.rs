mod commands;
mod config;
mod error;
mod files;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::FitArgs;

/// Variance-reduced stochastic EM for hidden Markov models.
#[derive(Debug, Parser)]
#[command(name = "hmm-vrso", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Simulate observations from a config file.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fit an HMM to an observations CSV.
    Fit(FitArgs),
    /// Run every optimizer on shared initializations of simulated data.
    Benchmark {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Worker threads (default: one per core).
        #[arg(long)]
        jobs: Option<usize>,
    },
    /// Posterior state probabilities and the most likely state at each time.
    Decode {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate { config, out, seed } => commands::simulate(config, out, *seed),
        Command::Fit(a) => commands::fit(a),
        Command::Benchmark { config, out, jobs } => commands::benchmark(config, out, *jobs),
        Command::Decode { data, params, out } => commands::decode(data, params, out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
