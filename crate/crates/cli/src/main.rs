use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde_json::json;
use styleshift::error::Error;
use styleshift::pipeline::{Pipeline, RunConfig, StageOutcome};

/// Synthetic style-shift experiments: data, training, evaluation and reports.
#[derive(Parser, Debug)]
#[command(name = "styleshift", version, after_help = "The output root can also be set with STYLESHIFT_OUT.")]
struct Cli {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set train.epochs=20`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Generate the synthetic dataset.
    GenData,
    /// Train the full model and write a checkpoint and metrics.
    Train,
    /// Disentanglement and per-style tables for the trained checkpoint.
    Eval,
    /// Train and evaluate every ablation variant over several seeds.
    Ablate,
    /// Accuracy as a function of the number of context examples.
    Fewshot,
    /// Assemble all results into CSV tables, JSON and plot data.
    Report,
}

fn error_record(e: &Error) -> serde_json::Value {
    let mut rec = json!({ "kind": e.kind(), "message": e.to_string() });
    match e {
        Error::Config(list) => rec["errors"] = json!(list),
        Error::Dependency(path) => rec["missing"] = json!(path),
        Error::Schema(section) => rec["section"] = json!(section),
        _ => {}
    }
    json!({ "error": rec })
}

fn run(cli: &Cli) -> Result<StageOutcome, Error> {
    let config = RunConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let pipeline = Pipeline::from_env(config);
    let log = |line: String| eprintln!("{line}");
    match cli.command {
        Command::GenData => pipeline.gen_data(),
        Command::Train => pipeline.train(&mut |l| log(l)),
        Command::Eval => pipeline.eval(),
        Command::Ablate => pipeline.ablate(&log),
        Command::Fewshot => pipeline.fewshot(),
        Command::Report => pipeline.report(),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            eprintln!("{}", json!({ "error": { "kind": "usage", "message": e.kind().to_string() } }));
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(outcome) => {
            println!("{}", serde_json::to_string(&outcome).expect("outcome serializes"));
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("{}", error_record(&e));
            ExitCode::from(1)
        }
    }
}
