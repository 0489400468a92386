//! `anomography` command-line driver.
//!
//! Every command works on a data directory with fixed file names, so a full
//! experiment is `gen-network`, `gen-traffic`, `run`, `eval` on one `--dir`.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::CliError;

#[derive(Debug, Parser)]
#[command(name = "anomography", version, about = "Streaming network anomography experiments")]
struct Cli {
    /// JSON experiment config; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Data directory read and written by every command.
    #[arg(long, global = true, default_value = ".")]
    dir: PathBuf,

    /// Overrides the config seed.
    #[arg(long, global = true, env = "ANOMOGRAPHY_SEED")]
    seed: Option<u64>,

    /// Worker threads for parallel kernels (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a Delaunay network with shortest-path routed OD flows.
    GenNetwork,
    /// Generate flows, anomalies, link loads and an observation mask.
    GenTraffic,
    /// Run the detectors over the link stream.
    Run {
        /// Resume the proposed detector from a checkpoint and append rows.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this slice index and write a checkpoint.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score detector output against the ground truth.
    Eval,
    /// Print the default config.
    DefaultConfig,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    if let Some(jobs) = cli.jobs {
        rayon::ThreadPoolBuilder::new()
            .num_threads(jobs)
            .build_global()
            .map_err(|e| CliError::config(format!("--jobs: {e}")))?;
    }
    let mut cfg = commands::load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    match cli.command {
        Command::GenNetwork => commands::gen_network(&cfg, &cli.dir),
        Command::GenTraffic => commands::gen_traffic(&cfg, &cli.dir),
        Command::Run { resume, stop_after } => commands::run(&cfg, &cli.dir, resume.as_deref(), stop_after),
        Command::Eval => commands::eval(&cfg, &cli.dir),
        Command::DefaultConfig => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            Ok(())
        }
    }
}
