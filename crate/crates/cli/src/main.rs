//! `rsag` command-line entry point.

mod commands;
mod inputs;

use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use rsag::config::{parse_override, Command, RunConfig, DATA_ROOT_ENV};

/// Marks an output directory whose command has not finished.
const SENTINEL: &str = "INCOMPLETE";
const VERSION_FILE: &str = "VERSION";

#[derive(Parser)]
#[command(name = "rsag", version, about = "Guided depth super-resolution with recurrent structure attention")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train on a dataset and write checkpoints plus a loss log.
    Train(Common),
    /// Evaluate a checkpoint and write a metrics CSV.
    Eval(Common),
    /// Predict HR depth maps as 16-bit PNGs.
    Infer(Common),
    /// Write the high/low-frequency decomposition of each input.
    Decompose(Common),
    /// Dump per-step structure-attention and mixed image-feature maps.
    Viz(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a configuration key (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Random seed (overrides the `seed` key).
    #[arg(long)]
    seed: Option<u64>,
}

fn run_config(command: Command, c: Common) -> Result<RunConfig> {
    let overrides = c.set.iter().map(|s| parse_override(s)).collect::<Result<Vec<_>, _>>()?;
    Ok(RunConfig {
        command,
        config_path: c.config,
        overrides,
        out_dir: c.out,
        seed: c.seed,
    })
}

fn run(cli: Cli) -> Result<()> {
    let (command, common) = match cli.command {
        Cmd::Train(c) => (Command::Train, c),
        Cmd::Eval(c) => (Command::Eval, c),
        Cmd::Infer(c) => (Command::Infer, c),
        Cmd::Decompose(c) => (Command::Decompose, c),
        Cmd::Viz(c) => (Command::Viz, c),
    };
    let run = run_config(command, common)?;
    let env_root = std::env::var(DATA_ROOT_ENV).ok();
    let cfg = commands::resolve(&run, env_root.as_deref())?;

    let out = &run.out_dir;
    fs::create_dir_all(out).with_context(|| format!("cannot create {}", out.display()))?;
    let sentinel = out.join(SENTINEL);
    fs::write(&sentinel, format!("{command:?} started\n"))?;
    fs::write(out.join(VERSION_FILE), format!("rsag {}\n", rsag::VERSION))?;
    cfg.write_echo(out)?;

    match command {
        Command::Train => commands::train(&cfg, out)?,
        Command::Eval => commands::eval(&cfg, out)?,
        Command::Infer => commands::infer(&cfg, out)?,
        Command::Decompose => commands::decompose(&cfg, out)?,
        Command::Viz => commands::viz(&cfg, out)?,
    }
    fs::remove_file(&sentinel)?;
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}
