use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use pma_core::merge::{merge, MergeMode, MergeStrategy};
use pma_core::planner::{plan, MergePlan};
use pma_core::testbed::{
    DataSpec, InitSpec, ModelKind, ModelSpec, TaskId, TrainConfig, TrainRun, Workbench, WsdSchedule,
};

pub const LR: f64 = 0.05;
pub const BATCH: usize = 16;
pub const CHECKPOINT_EVERY: u64 = 50;
pub const TOKENS_PER_STEP: u64 = 1024;
pub const WARMUP: u64 = 50;

/// Noisy teacher-network regression with an 8-32-1 tanh MLP.
pub fn base_config(seed: u64, steps: u64, schedule: WsdSchedule) -> TrainConfig {
    TrainConfig {
        seed,
        model: ModelSpec { kind: ModelKind::Mlp, layer_widths: vec![8, 32, 1] },
        data: DataSpec { task: TaskId::TeacherRegression, n_train: 1024, n_val: 2048, noise_std: 0.3 },
        steps,
        batch_size: BATCH,
        schedule,
        checkpoint_every: CHECKPOINT_EVERY,
        tokens_per_step: TOKENS_PER_STEP,
        spike: None,
        init: InitSpec::Random,
        start_step: 0,
    }
}

/// Short warmup followed by a constant learning rate up to `total` steps.
pub fn stable(total: u64) -> WsdSchedule {
    WsdSchedule { lr_peak: LR, lr_end: LR, warmup_steps: WARMUP, stable_steps: total - WARMUP, decay_steps: 0 }
}

/// Constant learning rate until `decay_from`, then cosine decay to `lr_end`
/// over `decay` steps.
pub fn decaying(decay_from: u64, decay: u64, lr_end: f64) -> WsdSchedule {
    WsdSchedule { lr_peak: LR, lr_end, warmup_steps: WARMUP, stable_steps: decay_from - WARMUP, decay_steps: decay }
}

pub fn tokens(steps: u64) -> u64 {
    steps * TOKENS_PER_STEP
}

/// Plans over a run's manifest with checkpoint paths resolved against its
/// directory.
pub fn plan_run(
    run: &TrainRun,
    strategy: &MergeStrategy,
    n: usize,
    interval_steps: u64,
    anchor_step: Option<u64>,
) -> anyhow::Result<MergePlan> {
    let manifest = run.manifest.rooted_at(&run.out_dir);
    Ok(plan(&manifest, strategy, n, tokens(interval_steps), anchor_step.map(tokens))?)
}

/// Plans `n` checkpoints `interval_steps` apart ending at `anchor_step`
/// (default: the last checkpoint) and merges them into `out`.
pub fn plan_and_merge(
    run: &TrainRun,
    strategy: &MergeStrategy,
    n: usize,
    interval_steps: u64,
    anchor_step: Option<u64>,
    out: &Path,
    mode: MergeMode,
) -> anyhow::Result<MergePlan> {
    let p = plan_run(run, strategy, n, interval_steps, anchor_step)?;
    merge(&p.checkpoint_paths(), &p.weights, strategy, out, mode)
        .with_context(|| format!("merging into {}", out.display()))?;
    Ok(p)
}

pub fn val_loss_of(bench: &Workbench, checkpoint: impl AsRef<Path>) -> anyhow::Result<f64> {
    Ok(bench.val_loss(&bench.load(checkpoint)?))
}

pub fn plan_paths(p: &MergePlan) -> Vec<PathBuf> {
    p.checkpoint_paths().into_iter().map(PathBuf::from).collect()
}

pub fn relative_gap(value: f64, reference: f64) -> f64 {
    (value - reference).abs() / reference.abs()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Metric map under construction; indicators are stored as 0/1.
#[derive(Default)]
pub struct Metrics(BTreeMap<String, f64>);

impl Metrics {
    pub fn set(&mut self, key: impl Into<String>, value: f64) {
        if value.is_finite() {
            self.0.insert(key.into(), value);
        }
    }

    pub fn flag(&mut self, key: impl Into<String>, ok: bool) {
        self.0.insert(key.into(), if ok { 1.0 } else { 0.0 });
    }

    pub fn finish(self) -> BTreeMap<String, f64> {
        self.0
    }
}
