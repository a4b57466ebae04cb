//! Command implementations behind the `segforge` binary. Lives in a library
//! so integration tests and fuzz targets can reach the config parser and
//! command plumbing without spawning processes.
//!
//! Failure classes partition the exit codes: 2 for configuration (bad flags,
//! malformed config files, incompatible checkpoints), 3 for data (missing or
//! undecodable inputs, I/O), 4 for numerical aborts. Gradient-check failures
//! exit 1: the run worked, the verdict is "fail".

pub mod commands;
pub mod config;

use segforge_core::error::{
    CheckpointError, ConfigError, DataError, ModelError, TensorError, TrainError,
};
use thiserror::Error;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Model(#[from] ModelError),

    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),

    #[error(transparent)]
    Tensor(#[from] TensorError),

    #[error(transparent)]
    Train(#[from] TrainError),
}

fn checkpoint_code(e: &CheckpointError) -> i32 {
    match e {
        // A missing or unreadable file is a data problem; anything the
        // decoder rejects is an incompatible artifact, config class.
        CheckpointError::Io(_) => EXIT_DATA,
        _ => EXIT_CONFIG,
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Model(_) => EXIT_CONFIG,
            CliError::Checkpoint(e) => checkpoint_code(e),
            CliError::Tensor(e) => match e {
                TensorError::NonFinite { .. } => EXIT_NUMERIC,
                _ => EXIT_CONFIG,
            },
            CliError::Train(e) if e.is_numeric() => EXIT_NUMERIC,
            CliError::Train(e) => match e {
                TrainError::EmptyTrainSet | TrainError::Output { .. } => EXIT_DATA,
                TrainError::Data(_) => EXIT_DATA,
                TrainError::Checkpoint(c) => checkpoint_code(c),
                _ => EXIT_CONFIG,
            },
        }
    }
}
