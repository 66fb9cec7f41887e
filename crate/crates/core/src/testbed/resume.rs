//! Forking a trajectory and restarting from merged checkpoints.

use std::path::Path;

use super::config::{InitSpec, TrainConfig};
use super::schedule::WsdSchedule;
use super::train::{train, StepRecord, TrainRun};
use super::TrainError;
use crate::merge::MergeStrategy;
use crate::store::{ManifestEntry, TrajectoryManifest};

/// A loss above this multiple of the trailing median counts as a spike.
pub const SPIKE_FACTOR: f64 = 5.0;
/// Trailing window for the spike detector's median.
pub const SPIKE_WINDOW: usize = 100;
/// Updates required before the detector starts judging.
pub const SPIKE_MIN_HISTORY: usize = 10;

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Step of the first update whose loss exceeds [`SPIKE_FACTOR`] times the
/// median of the preceding [`SPIKE_WINDOW`] losses, or is non-finite.
pub fn detect_spike(log: &[StepRecord]) -> Option<u64> {
    for (i, rec) in log.iter().enumerate() {
        if !rec.loss.is_finite() {
            return Some(rec.step);
        }
        if i < SPIKE_MIN_HISTORY {
            continue;
        }
        let mut window: Vec<f64> = log[i.saturating_sub(SPIKE_WINDOW)..i].iter().map(|r| r.loss).collect();
        if rec.loss > SPIKE_FACTOR * median(&mut window) {
            return Some(rec.step);
        }
    }
    None
}

/// New config that continues `base` from the checkpoint at `at_tokens`.
///
/// The checkpoint must lie within half a checkpoint period of `at_tokens`.
/// Parameters and momentum are restored and step/token counters continue
/// from the checkpoint; `schedule` replaces the original one if given.
pub fn fork(
    manifest: &TrajectoryManifest,
    manifest_dir: &Path,
    base: &TrainConfig,
    at_tokens: u64,
    schedule: Option<WsdSchedule>,
) -> Result<TrainConfig, TrainError> {
    let period = base.checkpoint_every * base.tokens_per_step;
    let entry = manifest
        .entries
        .iter()
        .min_by_key(|e| (e.tokens.abs_diff(at_tokens), std::cmp::Reverse(e.step)))
        .filter(|e| e.tokens.abs_diff(at_tokens) <= period / 2)
        .ok_or(TrainError::NoCheckpointNear(at_tokens))?;
    let mut cfg = base.clone();
    cfg.init = InitSpec::Checkpoint {
        path: manifest_dir.join(&entry.checkpoint_path).to_string_lossy().into_owned(),
        load_momentum: true,
    };
    cfg.start_step = entry.step;
    if let Some(s) = schedule {
        cfg.schedule = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Where a PMA-init restart may draw checkpoints from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResumePoint {
    /// The newest checkpoints in the manifest.
    Latest,
    /// Checkpoints taken before the first detected loss spike.
    BeforeSpike,
}

/// Checkpoints usable for a restart, oldest first.
///
/// For [`ResumePoint::BeforeSpike`], a spike flagged at update `r` means the
/// parameters after `r - 1` updates are already damaged, so only
/// checkpoints with `step < r - 1` qualify.
pub fn usable_checkpoints<'a>(
    manifest: &'a TrajectoryManifest,
    log: &[StepRecord],
    point: ResumePoint,
) -> Result<Vec<&'a ManifestEntry>, TrainError> {
    Ok(match point {
        ResumePoint::Latest => manifest.entries.iter().collect(),
        ResumePoint::BeforeSpike => {
            let spike = detect_spike(log).ok_or(TrainError::NoSpike)?;
            manifest.entries.iter().filter(|e| e.step + 1 < spike).collect()
        }
    })
}

/// Merges the last `n` usable checkpoints and trains on from the merge.
///
/// The restart begins at the newest merged checkpoint's step, uses
/// `resume_config`'s schedule and steps, and zeroes the momentum buffer.
#[allow(clippy::too_many_arguments)]
pub fn pma_init_resume(
    manifest: &TrajectoryManifest,
    manifest_dir: &Path,
    log: &[StepRecord],
    n: usize,
    strategy: &MergeStrategy,
    resume_config: &TrainConfig,
    point: ResumePoint,
    out_dir: &Path,
) -> Result<TrainRun, TrainError> {
    if n == 0 {
        return Err(TrainError::Config("n must be at least 1".into()));
    }
    let usable = usable_checkpoints(manifest, log, point)?;
    if usable.len() < n {
        return Err(TrainError::NotEnoughCheckpoints { needed: n, available: usable.len() });
    }
    let chosen = &usable[usable.len() - n..];
    let mut cfg = resume_config.clone();
    cfg.init = InitSpec::PmaInit {
        paths: chosen
            .iter()
            .map(|e| manifest_dir.join(&e.checkpoint_path).to_string_lossy().into_owned())
            .collect(),
        strategy: strategy.clone(),
        reset_momentum: true,
    };
    cfg.start_step = chosen.last().expect("n >= 1").step;
    cfg.spike = None;
    train(&cfg, out_dir)
}
