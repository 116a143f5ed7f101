//! `placevalue`: generate datasets, train models, evaluate them, inspect
//! saliency and run few-shot prompts against a remote endpoint.

mod commands;
mod error;
mod layout;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::commands::{eval, generate, remote, report, saliency, train};

#[derive(Debug, Parser)]
#[command(
    name = "placevalue",
    version,
    about = "Place-value arithmetic experiments"
)]
pub struct Cli {
    /// Seed for sampling, initialization and data order [default: 7].
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// `key = value` file with option defaults; flags take precedence.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root directory for every artifact [default: runs].
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Floating point precision for training and evaluation: f32 or f64 [default: f32].
    #[arg(long, global = true)]
    pub precision: Option<placevalue::DType>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample operand pairs and write training sets and test sets.
    Generate(generate::Args),
    /// Train a tokenizer and a model on a generated training set.
    Train(train::Args),
    /// Score trained models (or a fixture) on the test sets.
    Eval(eval::Args),
    /// Write per-token saliency reports for a trained model.
    Saliency(saliency::Args),
    /// Run few-shot prompts against a completion endpoint, or replay a transcript.
    Remote(remote::Args),
    /// Render a report CSV, or compare two of them.
    Report(report::Args),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(error::exit_code(&err) as u8)
        }
    }
}
