//! Choosing checkpoints to merge from a trajectory.
//!
//! A plan walks backward from an anchor token count in steps of the
//! interval `V`, taking the checkpoint nearest each target.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::merge::{compute_weights, MergeError, MergeStrategy, WeightVector};
use crate::store::{ManifestEntry, TrajectoryManifest};

pub const DEFAULT_MERGE_COUNT: usize = 10;
pub const PLAN_FILE: &str = "plan.json";

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("manifest is empty")]
    EmptyManifest,
    #[error("n must be at least 1")]
    ZeroCount,
    #[error("interval must be positive")]
    ZeroInterval,
    #[error("no checkpoint at or before anchor {0} tokens")]
    NoAnchor(u64),
    #[error(
        "insufficient history: no checkpoint within {tolerance} tokens of target {target} \
         (checkpoint {index} of {n}); reduce N or V"
    )]
    InsufficientHistory { target: i128, tolerance: u64, index: usize, n: usize },
    #[error(
        "duplicate selection: checkpoint at {tokens} tokens is nearest to two targets; \
         checkpoint spacing is coarser than the interval"
    )]
    DuplicateSelection { tokens: u64 },
    #[error(transparent)]
    Merge(#[from] MergeError),
}

/// Resolved merge plan, oldest checkpoint first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergePlan {
    pub strategy: MergeStrategy,
    pub n: usize,
    pub interval_tokens: u64,
    pub anchor_tokens: u64,
    pub resolved: Vec<ManifestEntry>,
    pub weights: WeightVector,
}

impl MergePlan {
    pub fn checkpoint_paths(&self) -> Vec<String> {
        self.resolved.iter().map(|e| e.checkpoint_path.clone()).collect()
    }
}

/// Picks `n` checkpoints spaced `interval_tokens` apart ending at the anchor.
///
/// Candidates are restricted to checkpoints at or before the anchor
/// (default: the last entry). For target `anchor - k*V` the nearest
/// checkpoint is taken, ties going to the later one; a target with nothing
/// within `V/2` is an insufficient-history error.
pub fn plan(
    manifest: &TrajectoryManifest,
    strategy: &MergeStrategy,
    n: usize,
    interval_tokens: u64,
    anchor_tokens: Option<u64>,
) -> Result<MergePlan, PlanError> {
    let last = manifest.last().ok_or(PlanError::EmptyManifest)?;
    if n == 0 {
        return Err(PlanError::ZeroCount);
    }
    if interval_tokens == 0 {
        return Err(PlanError::ZeroInterval);
    }
    let weights = compute_weights(strategy, n)?;
    let requested = anchor_tokens.unwrap_or(last.tokens);
    let candidates: Vec<&ManifestEntry> =
        manifest.entries.iter().filter(|e| e.tokens <= requested).collect();
    let anchor = candidates.last().ok_or(PlanError::NoAnchor(requested))?.tokens;

    let tolerance = interval_tokens / 2;
    let mut picked: Vec<&ManifestEntry> = Vec::with_capacity(n);
    for k in 0..n {
        let target = anchor as i128 - (k as i128) * interval_tokens as i128;
        // Later entries win ties: scan newest first, replace only on strictly closer.
        let mut best: Option<(&ManifestEntry, u128)> = None;
        for e in candidates.iter().rev() {
            let dist = (e.tokens as i128 - target).unsigned_abs();
            if best.is_none_or(|(_, d)| dist < d) {
                best = Some((e, dist));
            }
        }
        let (entry, dist) = best.expect("candidates non-empty");
        if dist > tolerance as u128 {
            return Err(PlanError::InsufficientHistory { target, tolerance, index: k + 1, n });
        }
        if picked.iter().any(|p| p.step == entry.step) {
            return Err(PlanError::DuplicateSelection { tokens: entry.tokens });
        }
        picked.push(entry);
    }
    picked.reverse();
    Ok(MergePlan {
        strategy: strategy.clone(),
        n,
        interval_tokens,
        anchor_tokens: anchor,
        resolved: picked.into_iter().cloned().collect(),
        weights,
    })
}

/// Published (total parameters, merge interval in tokens) anchor points.
const INTERVAL_ANCHORS: [(f64, f64); 3] = [(7e9, 4e9), (13e9, 8e9), (100e9, 80e9)];

/// Suggested merge interval for a model of the given total parameter count.
///
/// Piecewise-linear in log-log space through the anchor points, clamped at
/// both ends, rounded to the nearest billion tokens.
pub fn recommend_interval(model_params_total: u64) -> u64 {
    let p = (model_params_total.max(1)) as f64;
    let (first, last) = (INTERVAL_ANCHORS[0], INTERVAL_ANCHORS[INTERVAL_ANCHORS.len() - 1]);
    let tokens = if p <= first.0 {
        first.1
    } else if p >= last.0 {
        last.1
    } else {
        let seg = INTERVAL_ANCHORS
            .windows(2)
            .find(|w| p <= w[1].0)
            .expect("p lies inside the anchor range");
        let (x0, y0) = (seg[0].0.ln(), seg[0].1.ln());
        let (x1, y1) = (seg[1].0.ln(), seg[1].1.ln());
        let t = (p.ln() - x0) / (x1 - x0);
        (y0 + t * (y1 - y0)).exp()
    };
    ((tokens / 1e9).round() * 1e9) as u64
}
