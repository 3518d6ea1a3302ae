//! `distildp`: prepare data, run experiments and sweeps, and query the
//! privacy accountant.
//!
//! Exit codes: 0 success, 1 other failure, 2 configuration error,
//! 3 privacy budget exhausted or unreachable, 4 numerical divergence.

mod commands;
mod config;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ConfigError;

pub const OUT_DIR_ENV: &str = "DISTILDP_OUT_DIR";

#[derive(Parser, Debug)]
#[command(
    name = "distildp",
    version,
    about = "Differentially private distillation via synthetic text"
)]
struct Cli {
    /// Worker threads for per-example gradients, generation and evaluation.
    /// Defaults to all cores.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split, prefix and tokenize the corpus named by a config.
    Prepare {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Run one experiment (the method named in the config).
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Rerun the student stage over a grid of one hyperparameter.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// lambda, temperature, synthetic_count or alpha.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        values: Vec<f64>,
        #[arg(long, env = OUT_DIR_ENV, default_value = "out")]
        out_dir: PathBuf,
    },
    /// Print the RDP curve and ε of the subsampled Gaussian mechanism.
    Account {
        /// Sampling rate.
        #[arg(long)]
        q: f64,
        /// Noise multiplier.
        #[arg(long)]
        sigma: f64,
        #[arg(long)]
        steps: u64,
        #[arg(long)]
        delta: f64,
    },
    /// Write a deterministic toy corpus as JSON lines.
    GenerateToy {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2500)]
        n: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<ConfigError>().is_some() {
        return 2;
    }
    match err.downcast_ref::<distildp::Error>() {
        Some(e) if e.is_config() => 2,
        Some(e) if e.is_budget() => 3,
        Some(e) if e.is_numeric() => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be at least 1");
            return ExitCode::from(2);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
        {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let result = match cli.command {
        Command::Prepare { config, out_dir } => commands::prepare(&config, &out_dir),
        Command::Run { config, out_dir } => commands::run(&config, &out_dir),
        Command::Sweep {
            config,
            axis,
            values,
            out_dir,
        } => commands::sweep(&config, &axis, &values, &out_dir),
        Command::Account {
            q,
            sigma,
            steps,
            delta,
        } => commands::account(q, sigma, steps, delta),
        Command::GenerateToy { seed, n, out } => commands::generate_toy(seed, n, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
