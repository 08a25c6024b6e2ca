use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use eve::harness::{
    load_config, run_ablation, run_batch_sweep, run_stability_probe, run_stderr, run_training, write_csv_file,
    StabilityConfig, StderrConfig, TrainConfig,
};

/// Adam and Eve training experiments with CSV output.
#[derive(Parser)]
#[command(name = "eve", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model with one optimizer and write its metrics.
    Train(Io),
    /// Compare optimizers across batch sizes from a shared initialization.
    Sweep(Io),
    /// Compare Eve with and without the batch second-moment correction.
    Ablate(Io),
    /// Step-length spread of Adam and Eve on a stationary gradient stream.
    Stability(Io),
    /// Monte-Carlo standard errors of the relative-deviation estimators.
    Stderr(Io),
}

#[derive(Args)]
struct Io {
    /// TOML experiment config.
    #[arg(long)]
    config: PathBuf,
    /// Output file; overrides `out` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn output_path(flag: &Option<PathBuf>, config: &Option<PathBuf>) -> Result<PathBuf> {
    match flag.as_ref().or(config.as_ref()) {
        Some(p) => Ok(p.clone()),
        None => bail!("no output path: pass --out or set `out` in the config"),
    }
}

fn config_context(path: &Path) -> String {
    format!("loading config {}", path.display())
}

fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Train(io) => {
            let c: TrainConfig = load_config(&io.config).with_context(|| config_context(&io.config))?;
            let out = output_path(&io.out, &c.out)?;
            let run = run_training(&c)?;
            write_csv_file(&run.rows, &out)?;
            Ok(out)
        }
        Command::Sweep(io) => {
            let c: TrainConfig = load_config(&io.config).with_context(|| config_context(&io.config))?;
            let out = output_path(&io.out, &c.out)?;
            let rows = run_batch_sweep(&c, &c.batch_sizes)?;
            write_csv_file(&rows, &out)?;
            Ok(out)
        }
        Command::Ablate(io) => {
            let c: TrainConfig = load_config(&io.config).with_context(|| config_context(&io.config))?;
            let out = output_path(&io.out, &c.out)?;
            let summary = run_ablation(&c)?;
            write_csv_file(&summary.rows(), &out)?;
            Ok(out)
        }
        Command::Stability(io) => {
            let c: StabilityConfig = load_config(&io.config).with_context(|| config_context(&io.config))?;
            let out = output_path(&io.out, &c.out)?;
            let report = run_stability_probe(&c)?;
            write_csv_file(&[report], &out)?;
            Ok(out)
        }
        Command::Stderr(io) => {
            let c: StderrConfig = load_config(&io.config).with_context(|| config_context(&io.config))?;
            let out = output_path(&io.out, &c.out)?;
            let rows = run_stderr(&c)?;
            write_csv_file(&rows, &out)?;
            Ok(out)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(out) => {
            eprintln!("wrote {}", out.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
