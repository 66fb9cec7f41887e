//! Checkpoint weighting schemes and the deterministic merge engine.

mod engine;
mod weights;

pub use engine::{
    ema_update, merge, merge_vectors, report_path, sha256_file, MergeMode, MergeReport, TensorCount,
};
pub use weights::{compute_weights, MergeStrategy, WeightVector, WEIGHT_SUM_TOLERANCE};

use thiserror::Error;

use crate::store::StoreError;

#[derive(Debug, Error)]
pub enum MergeError {
    #[error("alpha must lie in (0, 1], got {0}")]
    Alpha(f64),
    #[error("invalid strategy: {0}")]
    Strategy(String),
    #[error("checkpoint count: {0}")]
    Count(String),
    #[error("invalid weights: {0}")]
    Weights(String),
    #[error("nothing to merge")]
    NoInputs,
    #[error("{weights} weights for {inputs} inputs")]
    WeightLength { weights: usize, inputs: usize },
    #[error("tensor {tensor:?} mismatch: {reason}")]
    Mismatch { tensor: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
