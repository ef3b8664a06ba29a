//! `qgen`: preprocess SQuAD, train, generate and evaluate questions.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::ConfigFlags;
use error::CliError;

#[derive(Parser)]
#[command(name = "qgen", version, about = "Generate questions from a passage and an answer")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Invert a SQuAD v1.1 file into answer+passage -> question examples
    Preprocess {
        #[command(flatten)]
        flags: ConfigFlags,
    },
    /// Train the model on preprocessed examples
    Train {
        #[command(flatten)]
        flags: ConfigFlags,
        /// Continue from the latest checkpoint in the checkpoint directory
        #[arg(long)]
        resume: bool,
    },
    /// Generate questions for JSONL {id, passage, answer} requests
    Generate {
        #[command(flatten)]
        flags: ConfigFlags,
        /// JSONL file of requests
        #[arg(long, value_name = "FILE")]
        input: PathBuf,
        /// Output JSONL [default: <output_dir>/generated.jsonl]
        #[arg(long, value_name = "FILE")]
        output: Option<PathBuf>,
        /// Checkpoint directory [default: latest under the checkpoint directory]
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Compare generated questions with references
    Evaluate {
        #[command(flatten)]
        flags: ConfigFlags,
        /// JSONL {id, question} references
        #[arg(long, value_name = "FILE")]
        references: PathBuf,
        /// JSONL {id, question_tagged} or {id, question} hypotheses
        #[arg(long, value_name = "FILE")]
        hypotheses: PathBuf,
    },
    /// Print the merged configuration as TOML
    ShowConfig {
        #[command(flatten)]
        flags: ConfigFlags,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let flags = match &cli.command {
        Command::Preprocess { flags }
        | Command::Train { flags, .. }
        | Command::Generate { flags, .. }
        | Command::Evaluate { flags, .. }
        | Command::ShowConfig { flags } => flags,
    };
    let cfg = config::load(flags)?;
    if !matches!(cli.command, Command::ShowConfig { .. }) {
        eprintln!("seed: {}", cfg.seed);
    }
    match cli.command {
        Command::Preprocess { .. } => commands::preprocess(&cfg),
        Command::Train { resume, .. } => commands::train(&cfg, resume),
        Command::Generate {
            input,
            output,
            checkpoint,
            ..
        } => commands::generate(&cfg, &input, output, checkpoint),
        Command::Evaluate {
            references,
            hypotheses,
            ..
        } => commands::evaluate(&cfg, &references, &hypotheses),
        Command::ShowConfig { .. } => commands::show_config(&cfg),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
