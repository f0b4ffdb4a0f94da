//! Stable process exit codes.

use sdflow_data::DataError;
use sdflow_train::{CheckpointError, TrainError};

use crate::config::ConfigError;

pub const OK: u8 = 0;
pub const FAILURE: u8 = 1;
pub const USAGE: u8 = 2;
pub const IO: u8 = 3;
pub const DIVERGENCE: u8 = 4;
pub const MISMATCH: u8 = 5;

/// Marks an error caused by invalid arguments.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct UsageError(pub String);

/// Marks an error caused by an artifact that does not fit the request.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
pub struct MismatchError(pub String);

fn checkpoint_code(e: &CheckpointError) -> u8 {
    match e {
        CheckpointError::Io { .. } => IO,
        _ => MISMATCH,
    }
}

fn data_code(e: &DataError) -> u8 {
    match e {
        e if e.is_io() => IO,
        DataError::Config(_) => USAGE,
        DataError::Corpus(_) => MISMATCH,
        _ => FAILURE,
    }
}

/// Exit code for the first recognized error in the chain.
pub fn code_for(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return USAGE;
        }
        if cause.is::<MismatchError>() {
            return MISMATCH;
        }
        if let Some(e) = cause.downcast_ref::<ConfigError>() {
            return if matches!(e, ConfigError::Io { .. }) { IO } else { USAGE };
        }
        if let Some(e) = cause.downcast_ref::<TrainError>() {
            return match e {
                TrainError::Diverged { .. } => DIVERGENCE,
                TrainError::Checkpoint(c) => checkpoint_code(c),
                TrainError::Data(d) => data_code(d),
                TrainError::Config(_) => USAGE,
                TrainError::Io { .. } | TrainError::Log { .. } => IO,
                TrainError::Core(sdflow_core::Error::Param(_)) => USAGE,
                TrainError::Core(_) => FAILURE,
            };
        }
        if let Some(e) = cause.downcast_ref::<CheckpointError>() {
            return checkpoint_code(e);
        }
        if let Some(e) = cause.downcast_ref::<DataError>() {
            return data_code(e);
        }
        if cause.is::<std::io::Error>() || cause.is::<csv::Error>() {
            return IO;
        }
        if let Some(sdflow_core::Error::Shape(_) | sdflow_core::Error::Param(_)) = cause.downcast_ref::<sdflow_core::Error>() {
            return USAGE;
        }
    }
    FAILURE
}
