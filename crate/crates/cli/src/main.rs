//! `dmpc`: demonstrations, training, closed-loop simulation and evaluation.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{CliError, CompareArgs, EvaluateArgs, GenDemosArgs, Globals, SimulateArgs};

/// Environment variable overriding the root of relative output paths.
const OUT_ROOT_VAR: &str = "DMPC_OUT_DIR";

#[derive(Debug, Parser)]
#[command(name = "dmpc", version, about = "Differentiable NMPC driving-style lab")]
struct Cli {
    /// Seed for every random choice of the command.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for batch solves.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Drive expert laps and write a demonstration dataset.
    GenDemos {
        #[arg(long)]
        profile: String,
        #[arg(long, default_value_t = 5)]
        laps: usize,
        #[arg(long, default_value = "paper")]
        track: String,
        /// Lap-start jitter level; defaults to the profile's.
        #[arg(long)]
        noise: Option<f64>,
        /// Fraction of samples to duplicate with perturbed states.
        #[arg(long, default_value_t = 0.0)]
        augment: f64,
        #[arg(long, default_value_t = 1.0)]
        augment_magnitude: f64,
        /// Equalize straight and curved samples.
        #[arg(long)]
        balance: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
    },
    /// Closed-loop laps with one controller.
    Simulate {
        /// expert, static, dynamic, track or sf.
        #[arg(long)]
        controller: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Expert schedule and lap-start settings.
        #[arg(long, default_value = "curve-oscillating")]
        profile: String,
        #[arg(long, default_value = "paper")]
        track: String,
        #[arg(long, default_value_t = 2)]
        laps: usize,
        #[arg(long)]
        start_speed: Option<f64>,
        #[arg(long)]
        jitter: Option<f64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Imitation metrics of a rollout against demonstrations.
    Evaluate {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-metre state traces with the demonstration band.
        #[arg(long)]
        traces: Option<PathBuf>,
        /// Cost-parameter traces of the rollout.
        #[arg(long)]
        param_traces: Option<PathBuf>,
    },
    /// Side-by-side table of imitation reports.
    Compare {
        #[arg(long, num_args = 1.., required = true)]
        reports: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    if cli.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }
    let g = Globals {
        seed: cli.seed,
        jobs: cli.jobs,
        out_root: std::env::var_os(OUT_ROOT_VAR).map(PathBuf::from),
    };
    match cli.command {
        Command::GenDemos {
            profile,
            laps,
            track,
            noise,
            augment,
            augment_magnitude,
            balance,
            out,
        } => commands::gen_demos(
            &GenDemosArgs {
                profile,
                laps,
                track,
                noise,
                augment,
                augment_magnitude,
                balance,
                out,
            },
            &g,
        ),
        Command::Train { config } => commands::train(&config, &g),
        Command::Simulate {
            controller,
            checkpoint,
            profile,
            track,
            laps,
            start_speed,
            jitter,
            out,
        } => commands::simulate(
            &SimulateArgs {
                controller,
                checkpoint,
                profile,
                track,
                laps,
                start_speed,
                jitter,
                out,
            },
            &g,
        ),
        Command::Evaluate {
            log,
            dataset,
            out,
            traces,
            param_traces,
        } => commands::evaluate(
            &EvaluateArgs {
                log,
                dataset,
                out,
                traces,
                param_traces,
            },
            &g,
        ),
        Command::Compare { reports, out } => commands::compare(&CompareArgs { reports, out }, &g),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // help and version requests are not errors
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_default_env()
        .init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
