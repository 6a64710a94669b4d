//! Batching, Adam, checkpoints and the epoch loop.

mod adam;
mod batching;
mod checkpoint;
mod config;
mod trainer;

use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::autodiff::TensorError;
use crate::bleu::BleuError;
use crate::decoding::DecodeError;
use crate::models::ModelError;
use crate::subword::SubwordError;

pub use adam::{adam_step, grad_norm, AdamParams, AdamState, PlateauSchedule, StepStats};
pub use batching::{make_batches, Batch, BatchPlan, EncodedPair};
pub use checkpoint::{Checkpoint, CheckpointError, MAGIC};
pub use config::{BatchSpec, TrainConfig};
pub use trainer::{
    best_epoch_of, epoch_checkpoint_path, evaluate_bleu, evaluate_loss, train, DevSurface, EpochRecord, TrainOptions,
    TrainOutcome, TrainReport,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} corpus is empty")]
    EmptyCorpus(&'static str),
    #[error("non-finite gradient at step {step}")]
    NonFiniteGradient { step: u64 },
    #[error("training diverged in epoch {epoch}; last good checkpoint: {}", last_good.as_ref().map_or("none".to_string(), |p| p.display().to_string()))]
    Diverged { epoch: usize, last_good: Option<PathBuf> },
    #[error("cannot resume: {0}")]
    Resume(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Bleu(#[from] BleuError),
    #[error(transparent)]
    Subword(#[from] SubwordError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io {
            path: path.display().to_string(),
            source,
        }
    }
}

#[cfg(test)]
mod tests;
