//! Desk-scale training testbed.
//!
//! Small dense models trained with SGD + momentum under a warmup-stable-decay
//! schedule. Every run is a pure function of its config: datasets,
//! initialization and mini-batches are all derived from the seed, so a
//! resumed run replays exactly the batches the original would have drawn.

mod config;
mod data;
mod model;
mod resume;
mod schedule;
mod train;

pub use config::{InitSpec, SpikeDirective, SpikeMode, TrainConfig};
pub use data::{batch_indices, generate, DataSpec, Dataset, Splits, Targets, TaskId};
pub use model::{l2_norm, LossKind, Model, ModelKind, ModelSpec};
pub use resume::{
    detect_spike, fork, pma_init_resume, usable_checkpoints, ResumePoint, SPIKE_FACTOR,
    SPIKE_MIN_HISTORY, SPIKE_WINDOW,
};
pub use schedule::{lr_at, WsdSchedule};
pub use train::{
    checkpoint_name, momentum_path, read_metrics, train, write_metrics, StepRecord, TrainRun,
    TrainSummary, Workbench, METRICS_FILE, MOMENTUM, PMA_INIT_FILE, SUMMARY_FILE,
};

use std::path::PathBuf;

use thiserror::Error;

use crate::merge::MergeError;
use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("step {step} is outside the schedule ({total} steps)")]
    StepOutOfRange { step: u64, total: u64 },
    #[error("diverged at step {step} (partial trajectory in {})", out_dir.display())]
    Diverged { step: u64, out_dir: PathBuf },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("no checkpoint near {0} tokens")]
    NoCheckpointNear(u64),
    #[error("need {needed} usable checkpoints, found {available}")]
    NotEnoughCheckpoints { needed: usize, available: usize },
    #[error("no loss spike found in the training log")]
    NoSpike,
    #[error("metrics: {0}")]
    Metrics(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Merge(#[from] MergeError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
