//! Three-phase alternating optimization of the bidirectional flow, its
//! learning-rate schedule, loss log and checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod log;
pub mod trainer;

pub use checkpoint::Checkpoint;
pub use config::{Phase, TrainConfig};
pub use error::{CheckpointError, Result, TrainError};
pub use log::{read_log, LossLog, LossRecord};
pub use trainer::{load_model, CheckpointMeta, RunOptions, Trainer};
