use clap::{Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

/// Multi-resolution time-series forecasting experiments.
#[derive(Parser)]
#[command(name = "mtst", version, about)]
struct Cli {
    /// Cap the worker thread pool (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a model from a TOML run config; writes checkpoint, history,
    /// and metrics into the output directory.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides MTST_OUT and the config file).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Evaluate a checkpoint on one split of a CSV dataset.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// train, val, or test.
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Forecast from a CSV holding exactly one look-back window.
    Forecast {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Input window CSV (L rows, the checkpoint's variate columns).
        #[arg(long)]
        dataset: PathBuf,
        /// Output CSV path (default forecast.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train base and ablated variant under identical seeds and compare.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// no-low-res, no-high-res, sinape, learnedape, or nope.
        #[arg(long)]
        mode: String,
        /// Number of paired runs; seeds are seed, seed+1, …
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the configured synthetic dataset as CSV.
    Synth {
        #[arg(long)]
        config: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(n) = cli.threads {
        mtst_core::limit_threads(n)?;
    }
    match cli.cmd {
        Cmd::Train { config, out } => mtst_cli::cmd_train(&config, out.as_deref()),
        Cmd::Evaluate { checkpoint, dataset, split, out } => {
            mtst_cli::cmd_evaluate(&checkpoint, &dataset, &split, out.as_deref())
        }
        Cmd::Forecast { checkpoint, dataset, out } => {
            mtst_cli::cmd_forecast(&checkpoint, &dataset, out.as_deref())
        }
        Cmd::Ablate { config, mode, seeds, out } => {
            mtst_cli::cmd_ablate(&config, &mode, seeds, out.as_deref())
        }
        Cmd::Synth { config, out } => mtst_cli::cmd_synth(&config, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MTST_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // single-line, machine-parseable error channel
            let msg = format!("{e:#}").replace('\n', "; ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
