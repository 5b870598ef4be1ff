use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use lbfgs_admm_cli::commands::{cmd_check, cmd_oracle, cmd_run};
use lbfgs_admm_cli::config::load_config;

/// Decentralized L-BFGS-ADMM experiment runner.
#[derive(Parser)]
#[command(name = "lbfgs-admm", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the configured output prefix.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the configured seed list with a single seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Toggle the invariant monitors.
    #[arg(long, value_parser = parse_switch)]
    monitors: Option<bool>,
}

#[derive(Subcommand)]
enum Command {
    /// Run the configured experiment and write trace CSVs plus a summary.
    Run(Common),
    /// Compute and export the centralized reference solution.
    Oracle(Common),
    /// Run with all invariant monitors and report the per-check table.
    Check(Common),
}

fn parse_switch(s: &str) -> Result<bool, String> {
    match s {
        "on" => Ok(true),
        "off" => Ok(false),
        other => Err(format!("expected on|off, got {other:?}")),
    }
}

fn build(common: &Common) -> Result<lbfgs_admm_cli::config::Experiment> {
    let mut experiment = load_config(&common.config)?.build()?;
    if let Some(out) = &common.out {
        experiment.out_prefix = out.clone();
    }
    if let Some(seed) = common.seed {
        experiment.seeds = vec![seed];
    }
    if let Some(monitors) = common.monitors {
        experiment.monitors = monitors;
    }
    Ok(experiment)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match &cli.command {
        Command::Run(common) => build(common).and_then(|exp| {
            let (summary, path) = cmd_run(&exp)?;
            println!("summary: {}", path.display());
            if !summary.all_monitors_passed {
                anyhow::bail!("one or more invariant monitors failed (see summary)");
            }
            Ok(())
        }),
        Command::Oracle(common) => build(common).and_then(|exp| {
            cmd_oracle(&exp, common.out.as_deref()).map(|_| ())
        }),
        Command::Check(common) => build(common).and_then(|exp| cmd_check(&exp).map(|_| ())),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
