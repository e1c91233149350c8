//! `csrom` command-line driver. Exit codes: 0 success, 1 validation or run
//! failure, 2 input error.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use csrom::rdsim::Integration;

use commands::Failure;
use config::{Overrides, RunConfig};

#[derive(Parser)]
#[command(
    name = "csrom",
    version,
    about = "Nonlinear reduced-order elastodynamics with complex-step derivatives"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration; defaults apply to missing keys.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Overrides every named seed.
    #[arg(long, global = true, value_name = "INT")]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Leave the fictitious force out of the reduced dynamics.
    #[arg(long, global = true)]
    drop_fict: bool,
    /// Integrate forces with the trained cubature rule.
    #[arg(long, global = true, conflicts_with = "exact")]
    cubature: bool,
    /// Integrate forces over every element.
    #[arg(long, global = true)]
    exact: bool,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Run the forcing script and record training poses.
    GenData,
    /// Fit PCA and the orthogonal autoencoder.
    TrainDae,
    /// Train the neural cubature rule.
    TrainCubature,
    /// Run the reduced simulation and export frames.
    Simulate,
    /// Check the trained artifacts against independent oracles.
    Validate,
    /// Time the parallel and sequential assembly paths.
    Bench,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let c = &cli.common;
    let overrides = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        drop_fict: c.drop_fict,
        integration: match (c.cubature, c.exact) {
            (true, _) => Some(Integration::Cubature),
            (_, true) => Some(Integration::ExactSum),
            _ => None,
        },
    };
    let cfg = match RunConfig::load(c.config.as_deref(), &overrides) {
        Ok(cfg) => cfg,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(2);
        }
    };
    let run = match cli.command {
        Command::GenData => commands::gen_data,
        Command::TrainDae => commands::train_dae,
        Command::TrainCubature => commands::train_cubature,
        Command::Simulate => commands::simulate,
        Command::Validate => commands::validate,
        Command::Bench => commands::bench,
    };
    match run(&cfg) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Input(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
