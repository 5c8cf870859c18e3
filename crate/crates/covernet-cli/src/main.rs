//! Book-cover genre classification pipeline.
//!
//! Exit codes: 0 success, 2 data-protocol violation, 3 parse error,
//! 4 I/O or decode error, 5 numerical failure.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};

use config::RunConfig;
use error::{CliResult, EXIT_PARSE};

#[derive(Parser)]
#[command(
    name = "covernet",
    version,
    about = "Train and evaluate book-cover genre classifiers"
)]
struct Cli {
    /// Upper bound on worker threads; results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Balance classes, split train/test, and write the label map.
    Prepare {
        /// key=value run configuration file.
        #[arg(long)]
        config: PathBuf,
    },
    /// Run optimizer steps, writing checkpoints and a loss log.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint to continue from; the run is bit-identical to
        /// one that never stopped.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Score the test split and write report files.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (defaults to checkpointDir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the top-k classes for one image.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// How many classes to print.
        #[arg(short, long, default_value_t = 5)]
        k: usize,
        /// Label map CSV giving class names (defaults to classN).
        #[arg(long)]
        labels: Option<PathBuf>,
        /// One line of classId:probability pairs instead of prose.
        #[arg(long)]
        machine: bool,
    },
    /// Project test-split softmax activations to 2-D plot data.
    Project {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Output directory (defaults to checkpointDir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check every kernel's gradients by central finite differences.
    Gradcheck {
        /// Deliberately offset the convolution input gradient to prove
        /// the checks can fail.
        #[arg(long)]
        inject_fault: bool,
    },
}

fn dispatch(cli: Cli) -> CliResult<()> {
    if let Some(threads) = cli.threads {
        covernet::parallel::set_max_threads(threads);
    }
    match cli.command {
        Command::Prepare { config } => {
            let config = RunConfig::load(&config)?;
            commands::prepare::run(&config)
        }
        Command::Train { config, resume } => {
            let config = RunConfig::load(&config)?;
            commands::train::run(&config, resume.as_deref())
        }
        Command::Evaluate {
            config,
            checkpoint,
            out,
        } => {
            let config = RunConfig::load(&config)?;
            commands::evaluate::run(&config, &checkpoint, out.as_deref())
        }
        Command::Predict {
            checkpoint,
            image,
            k,
            labels,
            machine,
        } => commands::predict::run(&checkpoint, &image, k, labels.as_deref(), machine),
        Command::Project {
            config,
            checkpoint,
            out,
        } => {
            let config = RunConfig::load(&config)?;
            commands::project::run(&config, &checkpoint, out.as_deref())
        }
        Command::Gradcheck { inject_fault } => commands::gradcheck::run(inject_fault),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            // Help and version requests are not parse failures.
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_PARSE,
            };
            let _ = err.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
