mod commands;
mod config;
mod exit;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::commands::Method;
use crate::config::RunConfig;

/// Parallel diffusion sampling with Picard iteration and consistency models.
#[derive(Parser)]
#[command(name = "pcm", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: PathBuf,
    /// Override the root seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the base denoiser on the toy dataset.
    TrainBase(Common),
    /// Record base-model Picard histories.
    GenTraj(Common),
    /// Consistency fine-tuning on the recorded histories.
    TrainPcm(Common),
    /// Draw samples with one method and report per-iteration errors.
    Sample {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        method: Method,
    },
    /// Compare all available methods on the configured seeds.
    Bench(Common),
    /// Error curves of switched PCM inference for several stiffness values.
    SweepStiffness {
        #[command(flatten)]
        common: Common,
        /// Comma-separated stiffness values; defaults to `switch.sweep`.
        #[arg(long, value_delimiter = ',')]
        stiffness: Vec<f64>,
    },
}

fn resolve(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &common.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::TrainBase(c) => commands::train_base(&resolve(&c)?),
        Command::GenTraj(c) => commands::gen_traj(&resolve(&c)?),
        Command::TrainPcm(c) => commands::train_pcm_cmd(&resolve(&c)?),
        Command::Sample { common, method } => commands::sample(&resolve(&common)?, method),
        Command::Bench(c) => commands::bench(&resolve(&c)?),
        Command::SweepStiffness { common, stiffness } => {
            commands::sweep_stiffness(&resolve(&common)?, &stiffness)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit::code_for(&e) as u8)
        }
    }
}
