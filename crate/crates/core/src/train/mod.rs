//! Staged adversarial training: one discriminator step then one generator
//! step per batch, each with its own AdamW state.

mod batch;
mod checkpoint;
mod config;
mod optim;
mod trainer;

use std::path::PathBuf;

pub use batch::{make_batches, padding_totals};
pub use checkpoint::{read_state, Checkpoint, CheckpointState};
pub use config::{ConfigError, DiscScale, Preset, Stage, TrainConfig};
pub use optim::{lr_at, AdamW, AdamWParams, OptimError};
pub use trainer::{EpochReport, Models, StepRecord, Trainer, LOSS_CSV_HEADER};

use crate::losses::LossError;
use crate::tensor::serialize::DecodeError;
use crate::tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error("training diverged at step {step}: generator loss {total} exceeds {threshold}")]
    Divergence { step: u64, total: f64, threshold: f64 },
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: PathBuf, reason: String },
    #[error("checkpoint {path}: {source}")]
    Decode { path: PathBuf, source: DecodeError },
}
