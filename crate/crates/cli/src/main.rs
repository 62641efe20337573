//! `refacer` command-line front end.
//!
//! Every subcommand writes `manifest.json` into its output directory. On
//! failure exactly one line `error[Kind]: message` goes to stderr.

mod commands;
mod config;
mod manifest;

use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use thiserror::Error;

use refacer::anonymize::AnonymizeError;
use refacer::cyclegan::{CheckpointError, CycleGanError};
use refacer::dataset::DatasetError;
use refacer::experiment::ExperimentError;
use refacer::metrics::MetricsError;
use refacer::nifti::NiftiError;
use refacer::pgm::PgmError;
use refacer::phantom::PhantomError;
use refacer::slicing::SlicingError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    UnknownFlag(String),
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    MissingInput(String),
    #[error("line {line}: {message}")]
    ConfigParse { line: usize, message: String },
    #[error("{0}")]
    InvalidArgument(String),
    #[error("{0}")]
    Format(String),
    #[error("{0}")]
    Compute(String),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn kind(&self) -> &'static str {
        match self {
            CliError::UnknownFlag(_) => "UnknownFlag",
            CliError::Usage(_) => "Usage",
            CliError::MissingInput(_) => "MissingInput",
            CliError::ConfigParse { .. } => "ConfigParse",
            CliError::InvalidArgument(_) => "InvalidArgument",
            CliError::Format(_) => "Format",
            CliError::Compute(_) => "Compute",
            CliError::Io(_) => "Io",
        }
    }

    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::UnknownFlag(_) | CliError::Usage(_) => 2,
            _ => 1,
        }
    }
}

fn is_not_found(e: &std::io::Error) -> bool {
    e.kind() == std::io::ErrorKind::NotFound
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        if is_not_found(&e) {
            CliError::MissingInput(e.to_string())
        } else {
            CliError::Io(e.to_string())
        }
    }
}

impl From<NiftiError> for CliError {
    fn from(e: NiftiError) -> Self {
        match &e {
            NiftiError::Io { source, .. } if is_not_found(source) => CliError::MissingInput(e.to_string()),
            NiftiError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<DatasetError> for CliError {
    fn from(e: DatasetError) -> Self {
        let missing = match &e {
            DatasetError::Io { source, .. } => is_not_found(source),
            DatasetError::Csv { source, .. } => matches!(source.kind(), csv::ErrorKind::Io(io) if is_not_found(io)),
            _ => false,
        };
        if missing {
            CliError::MissingInput(e.to_string())
        } else if let DatasetError::Io { .. } = e {
            CliError::Io(e.to_string())
        } else {
            CliError::Format(e.to_string())
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match &e {
            CheckpointError::Io { source, .. } if is_not_found(source) => CliError::MissingInput(e.to_string()),
            CheckpointError::Io { .. } => CliError::Io(e.to_string()),
            _ => CliError::Format(e.to_string()),
        }
    }
}

impl From<PgmError> for CliError {
    fn from(e: PgmError) -> Self {
        CliError::Io(e.to_string())
    }
}

macro_rules! compute_errors {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::Compute(e.to_string())
            }
        }
    )*};
}

compute_errors!(AnonymizeError, CycleGanError, ExperimentError, MetricsError, PhantomError, SlicingError);

#[derive(Debug, Parser)]
#[command(name = "refacer", version, about = "Phantom generation, face anonymization and CycleGAN refacing")]
struct Cli {
    /// Worker threads for parallel stages. 1 gives bit-identical reruns.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a cohort of synthetic head phantoms as NIfTI volumes.
    PhantomGen(commands::PhantomGenArgs),
    /// Blur or remove the face of every volume in a cohort.
    Anonymize(commands::AnonymizeArgs),
    /// Extract normalized sagittal slices into a slice dataset.
    Slice(commands::SliceArgs),
    /// Train a CycleGAN between anonymized and original slices.
    Train(commands::TrainArgs),
    /// Reface anonymized slices with a trained checkpoint.
    Reconstruct(commands::ReconstructArgs),
    /// Score anonymized and reconstructed slices against the originals.
    Evaluate(commands::EvaluateArgs),
    /// Run every stage from a single config file.
    Pipeline(commands::PipelineArgs),
}

fn one_line(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn usage_error(e: &clap::Error) -> CliError {
    let text = e.to_string();
    let first = text
        .lines()
        .map(str::trim)
        .find(|l| !l.is_empty())
        .unwrap_or("invalid arguments")
        .trim_start_matches("error: ")
        .to_string();
    match e.kind() {
        ErrorKind::UnknownArgument | ErrorKind::InvalidSubcommand => CliError::UnknownFlag(first),
        ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand | ErrorKind::MissingSubcommand => {
            CliError::Usage("no subcommand given; run `refacer --help`".into())
        }
        _ => CliError::Usage(first),
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(CliError::InvalidArgument("--threads must be >= 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| CliError::Compute(e.to_string()))?;
    }
    match cli.command {
        Command::PhantomGen(a) => commands::phantom_gen(&a),
        Command::Anonymize(a) => commands::anonymize(&a),
        Command::Slice(a) => commands::slice(&a),
        Command::Train(a) => commands::train(&a),
        Command::Reconstruct(a) => commands::reconstruct(&a),
        Command::Evaluate(a) => commands::evaluate(&a),
        Command::Pipeline(a) => commands::pipeline(&a),
    }
}

fn report(e: &CliError) -> ExitCode {
    eprintln!("error[{}]: {}", e.kind(), one_line(&e.to_string()));
    ExitCode::from(e.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => return report(&usage_error(&e)),
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report(&e),
    }
}
