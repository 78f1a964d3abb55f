mod commands;
mod config;

use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};

use config::{RunConfig, OUTPUT_DIR_ENV};

/// Curriculum image–caption pretraining experiments.
///
/// Every setting is a `key = value` entry, given either in a file passed as
/// `--config=PATH` or directly as `--key=value`. Flags win over the file.
/// The output directory may also be set through CURVL_OUTPUT_DIR.
#[derive(Parser, Debug)]
#[command(name = "curvl", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic train/eval dataset and concept lexicon.
    Gen(Settings),
    /// Split a dataset into curriculum phases and report phase statistics.
    Partition(Settings),
    /// Report per-phase statistics only.
    Stats(Settings),
    /// Train one model and write its checkpoint and metrics.
    Train(Settings),
    /// Zero-shot evaluation of a checkpoint.
    Eval(Settings),
    /// Run the baseline/curriculum × loss grid over several seeds.
    Ablate(Settings),
}

#[derive(clap::Args, Debug)]
struct Settings {
    /// `--key=value` settings, including `--config=PATH`.
    #[arg(allow_hyphen_values = true, num_args = 0.., value_name = "--KEY=VALUE")]
    settings: Vec<String>,
}

fn run(cli: Cli) -> Result<()> {
    let (Command::Gen(s)
    | Command::Partition(s)
    | Command::Stats(s)
    | Command::Train(s)
    | Command::Eval(s)
    | Command::Ablate(s)) = &cli.command;
    let cfg = RunConfig::resolve(&s.settings, std::env::var(OUTPUT_DIR_ENV).ok())?;
    match cli.command {
        Command::Gen(_) => commands::gen(&cfg),
        Command::Partition(_) => commands::partition(&cfg),
        Command::Stats(_) => commands::stats(&cfg),
        Command::Train(_) => commands::train_cmd(&cfg),
        Command::Eval(_) => commands::eval(&cfg),
        Command::Ablate(_) => commands::ablate(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
