//! `mgrind`: train, test, time, finetune and extract with mgrind nets.
//!
//! Exit status is 0 on success, 1 on runtime or configuration errors and 2
//! on usage errors. Every error is reported as one line on stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "mgrind", version, about = "Train and run convolutional networks on the CPU")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a net with the settings of a solver file.
    Train {
        #[arg(long)]
        solver: PathBuf,
        /// Continue from a snapshot.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Replaces the solver file's seed (MGRIND_SEED does too).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Report mean loss and accuracy of trained weights on a model's test data.
    Test {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Number of test batches.
        #[arg(long)]
        iterations: u64,
    },
    /// Time each layer's forward and backward pass.
    Time {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
        iterations: u64,
        /// Print key=value lines instead of a table.
        #[arg(long)]
        machine: bool,
    },
    /// Initialize a new net from trained weights by layer name, then train it.
    Finetune {
        #[arg(long)]
        solver: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        /// Skip layers whose shapes conflict instead of failing.
        #[arg(long)]
        permissive: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Write a blob's values for every image of an IDX file.
    Extract {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        blob: String,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Collapses a multi-line message into one line.
fn one_line(msg: &str) -> String {
    msg.lines()
        .map(str::trim)
        .take_while(|l| !l.starts_with("Usage:") && !l.starts_with("For more information"))
        .filter(|l| !l.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            eprintln!("{}", one_line(&e.render().to_string()));
            return ExitCode::from(2);
        }
    };
    let result = match cli.command {
        Command::Train { solver, resume, seed } => commands::train(&solver, resume.as_deref(), seed),
        Command::Test {
            model,
            weights,
            iterations,
        } => commands::test(&model, &weights, iterations),
        Command::Time {
            model,
            iterations,
            machine,
        } => commands::time(&model, iterations, machine),
        Command::Finetune {
            solver,
            weights,
            permissive,
            seed,
        } => commands::finetune(&solver, &weights, permissive, seed),
        Command::Extract {
            model,
            weights,
            blob,
            input,
            out,
        } => commands::extract(&model, &weights, &blob, &input, &out),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", one_line(&format!("{e:#}")));
            ExitCode::from(1)
        }
    }
}
