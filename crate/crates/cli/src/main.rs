use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use seqcont_cli::commands;
use seqcont_cli::config::RunConfig;

#[derive(Parser)]
#[command(name = "seqcont", version, about = "Continuous-output seq2seq: train, translate, eval, bench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    /// `key = value` config file.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. `--set hidden=64`. Repeatable.
    #[arg(short, long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model; writes checkpoints and per-epoch metrics.
    Train(Common),
    /// Translate `test_src` with a trained checkpoint.
    Translate(Common),
    /// Score `hyp` against `test_tgt`.
    Eval(Common),
    /// Time training steps and write the throughput CSV.
    Bench(Common),
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let (Command::Train(c) | Command::Translate(c) | Command::Eval(c) | Command::Bench(c)) = &cli.command;
    let cfg = RunConfig::resolve(c.config.as_deref(), &c.overrides)?;
    match cli.command {
        Command::Train(_) => commands::train(&cfg),
        Command::Translate(_) => commands::translate(&cfg),
        Command::Eval(_) => commands::eval(&cfg).map(drop),
        Command::Bench(_) => commands::bench(&cfg).map(drop),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
