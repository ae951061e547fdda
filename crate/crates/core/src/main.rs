use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use fedbasis::cli::{self, ExperimentConfig, Overrides};
use fedbasis::Error;

#[derive(Parser)]
#[command(name = "fedbasis", version, about = "Personalized federated learning with basis models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Partition the data into clients and write the manifest.
    BuildBench(Common),
    /// Run federated training and write a checkpoint plus metrics log.
    Train(Common),
    /// Personalize new clients and write a last/best report.
    Personalize(Common),
    /// Collapse statistics, coefficient export and compression sweeps.
    Diagnose(Common),
}

#[derive(Args)]
struct Common {
    /// JSON configuration file.
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Override a configuration key, e.g. `fed.rounds=10`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

/// Stderr line for failed runs; one JSON object per line.
#[derive(Serialize)]
struct ErrorLine<'a> {
    error: &'a str,
    message: String,
}

fn fail(kind: &str, message: String) -> ExitCode {
    let line = ErrorLine { error: kind, message };
    eprintln!("{}", serde_json::to_string(&line).expect("serializable"));
    ExitCode::from(if kind == "validation" { 1 } else { 2 })
}

fn threads_from_env() -> Result<Option<usize>, Error> {
    match std::env::var("FEDBASIS_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::Config(format!("FEDBASIS_THREADS must be a positive integer, got {v:?}"))),
        },
        Err(_) => Ok(None),
    }
}

fn run(command: Command) -> Result<serde_json::Value, Error> {
    if let Some(n) = threads_from_env()? {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size thread pool: {e}")))?;
    }
    let (Command::BuildBench(c) | Command::Train(c) | Command::Personalize(c) | Command::Diagnose(c)) = &command;
    let overrides = Overrides {
        seed: c.seed,
        out: c.out.clone(),
        set: c.set.clone(),
    };
    let cfg = ExperimentConfig::load(c.config.as_deref(), &overrides)?;
    let summary = match command {
        Command::BuildBench(_) => serde_json::to_value(cli::cmd_build_bench(&cfg)?),
        Command::Train(_) => serde_json::to_value(cli::cmd_train(&cfg)?),
        Command::Personalize(_) => serde_json::to_value(cli::cmd_personalize(&cfg)?),
        Command::Diagnose(_) => serde_json::to_value(cli::cmd_diagnose(&cfg)?),
    };
    Ok(summary?)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => return fail("validation", e.to_string().trim_end().replace('\n', " ")),
    };
    match run(cli.command) {
        Ok(summary) => {
            println!("{}", serde_json::to_string_pretty(&summary).expect("serializable"));
            ExitCode::SUCCESS
        }
        Err(e) if e.is_validation() => fail("validation", e.to_string()),
        Err(e) => fail("runtime", e.to_string()),
    }
}
