//! Error type and exit-code policy for every subcommand.
//!
//! Exit codes: 0 success, 2 data-protocol violation, 3 parse error,
//! 4 I/O or decode error, 5 numerical failure.

use std::path::PathBuf;

use covernet::batch::BatchError;
use covernet::checkpoint::CheckpointError;
use covernet::data::DataError;
use covernet::eval::EvalError;
use covernet::image::ImageError;
use covernet::net::NetError;
use covernet::projection::ProjectionError;
use covernet::tensor::TensorError;
use thiserror::Error;

use crate::config::ConfigError;

pub const EXIT_DATA: i32 = 2;
pub const EXIT_PARSE: i32 = 3;
pub const EXIT_IO: i32 = 4;
pub const EXIT_NUMERIC: i32 = 5;

pub type CliResult<T> = Result<T, CliError>;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Batch(#[from] BatchError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Projection(#[from] ProjectionError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("missing input: {0}")]
    MissingPath(PathBuf),
    /// Run inputs that disagree with each other (checkpoint vs config
    /// vs split), caught before any work starts.
    #[error("{0}")]
    Conflict(String),
    /// A flag value outside its documented range.
    #[error("{0}")]
    Arg(String),
    #[error("{0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(e) => match e {
                ConfigError::Io { .. } => EXIT_IO,
                _ => EXIT_PARSE,
            },
            CliError::Data(e) => match e {
                DataError::MalformedRow { .. }
                | DataError::MalformedClassTable { .. }
                | DataError::MalformedLabelMap { .. }
                | DataError::BadSplitMeta(_) => EXIT_PARSE,
                DataError::Io { .. } => EXIT_IO,
                _ => EXIT_DATA,
            },
            CliError::Image(_) | CliError::Checkpoint(_) => EXIT_IO,
            CliError::Batch(e) => match e {
                BatchError::EmptyBatch { .. } | BatchError::NothingLoadable => EXIT_IO,
                _ => EXIT_DATA,
            },
            CliError::Net(e) => match e {
                // Tensors present but wrong for this run: a mismatch
                // between artifacts, not a numerical fault.
                NetError::OptimizerKind { .. }
                | NetError::UnknownModelCode(_)
                | NetError::ClassCount { .. }
                | NetError::MissingParam(_)
                | NetError::UnknownParam(_)
                | NetError::ParamShape { .. }
                | NetError::HeadTooSmall(_)
                | NetError::MissingHead => EXIT_DATA,
                _ => EXIT_NUMERIC,
            },
            CliError::Eval(_)
            | CliError::Projection(_)
            | CliError::Tensor(_)
            | CliError::Numerical(_) => EXIT_NUMERIC,
            CliError::Io { .. } | CliError::MissingPath(_) => EXIT_IO,
            CliError::Conflict(_) => EXIT_DATA,
            CliError::Arg(_) => EXIT_PARSE,
        }
    }
}

pub fn io_ctx(path: &std::path::Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Input files are checked up front so a long run cannot die midway
/// on a typo'd path.
pub fn require_file(path: &std::path::Path) -> CliResult<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::MissingPath(path.to_path_buf()))
    }
}

pub fn require_dir(path: &std::path::Path) -> CliResult<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(CliError::MissingPath(path.to_path_buf()))
    }
}
