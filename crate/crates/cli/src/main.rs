//! `digit`: simulate, train, evaluate, serve and summarize audit logs.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use digit_core::datalake::Split;
use digit_core::predictor::ModelKind;

use commands::{CliError, AGGREGATES_FILE};

/// Log levels accepted in `DIGIT_LOG`.
const LOG_LEVELS: [&str; 4] = ["error", "warn", "info", "debug"];

#[derive(Parser)]
#[command(name = "digit", version, about = "Traffic digital twin")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the physical simulation with sensing and write JSONL aggregates.
    Simulate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        days: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a forecaster on a directory written by `simulate`.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: ModelKind,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the metrics of a checkpoint on one split of a data directory.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        split: Split,
    },
    /// Run the closed loop and the HTTP API until SIGTERM or Ctrl-C.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
    /// Summarize drift reports and promotions in an audit log.
    DriftReport {
        #[arg(long)]
        audit: PathBuf,
    },
}

fn init_logging() -> Result<(), CliError> {
    let level = match std::env::var("DIGIT_LOG") {
        Ok(v) if LOG_LEVELS.contains(&v.as_str()) => v,
        Ok(v) => return Err(CliError::Usage(format!("DIGIT_LOG must be one of {}, got `{v}`", LOG_LEVELS.join(", ")))),
        Err(_) => "info".into(),
    };
    env_logger::Builder::new().parse_filters(&level).target(env_logger::Target::Stderr).init();
    Ok(())
}

fn print_json(value: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { config, days, out } => {
            commands::simulate(&config, days, &out)?;
        }
        Command::Train { data, model, out } => {
            let report = commands::train_cmd(&data, model, &out)?;
            log::info!(
                "test rmse {:.3} (persistence {:.3}); wrote {} and {}",
                report.rmse,
                report.persistence.rmse,
                out.display(),
                commands::metrics_path(&out).display()
            );
        }
        Command::Evaluate { ckpt, data, split } => print_json(&commands::evaluate_cmd(&ckpt, &data, split)?),
        Command::Serve { config } => commands::serve_cmd(&config)?,
        Command::DriftReport { audit } => print_json(&commands::drift_report(&audit)?),
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_logging() {
        eprintln!("digit: {e}");
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            if matches!(&e, CliError::Io { path, .. } if path.ends_with(AGGREGATES_FILE)) {
                log::error!("expected a directory written by `digit simulate`");
            }
            ExitCode::FAILURE
        }
    }
}
