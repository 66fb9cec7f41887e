//! Continued training from a merged initialization versus the last checkpoint.

use std::collections::BTreeMap;
use std::path::Path;

use pma_core::merge::MergeStrategy;
use pma_core::testbed::{train, InitSpec, WsdSchedule};

use super::common::{base_config, decaying, plan_paths, plan_run, relative_gap, stable, Metrics, CHECKPOINT_EVERY};
use super::{Criterion, RecipeOptions};

pub const PRETRAIN_STEPS: u64 = 2000;
pub const CONTINUE_STEPS: u64 = 1000;
/// The continued-training stage uses its own, larger batch.
pub const CONTINUE_BATCH: usize = 128;
pub const MERGE_N: usize = 10;
pub const MAX_GAP: f64 = 0.02;

fn schedules() -> Vec<(&'static str, WsdSchedule)> {
    let end = PRETRAIN_STEPS + CONTINUE_STEPS;
    vec![("constant", stable(end)), ("cosine", decaying(PRETRAIN_STEPS, CONTINUE_STEPS, 0.0))]
}

pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion::new("ok.final_within_2pct", "final val loss of merged vs last-checkpoint init within 2% under both schedules", 0.8),
        Criterion::new("ok.merged_lower_at_step1", "merged init has the lower loss on the first continued step", 0.8),
    ]
}

pub fn run_seed(seed: u64, dir: &Path, _: &RecipeOptions) -> anyhow::Result<BTreeMap<String, f64>> {
    let cfg = base_config(seed, PRETRAIN_STEPS, stable(PRETRAIN_STEPS));
    let pre = train(&cfg, &dir.join("pretrain"))?;
    let p = plan_run(&pre, &MergeStrategy::Sma, MERGE_N, CHECKPOINT_EVERY, None)?;
    let paths: Vec<String> = plan_paths(&p).iter().map(|x| x.to_string_lossy().into_owned()).collect();
    let last = paths.last().expect("plan is non-empty").clone();

    let mut m = Metrics::default();
    let mut all_close = true;
    let mut all_lower = true;
    for (name, schedule) in schedules() {
        let mut ct = cfg.clone();
        ct.steps = PRETRAIN_STEPS + CONTINUE_STEPS;
        ct.batch_size = CONTINUE_BATCH;
        ct.schedule = schedule;
        ct.start_step = PRETRAIN_STEPS;

        let mut merged_cfg = ct.clone();
        merged_cfg.init = InitSpec::PmaInit { paths: paths.clone(), strategy: MergeStrategy::Sma, reset_momentum: true };
        let mut last_cfg = ct;
        last_cfg.init = InitSpec::Checkpoint { path: last.clone(), load_momentum: false };

        let merged = train(&merged_cfg, &dir.join(format!("{name}_merged")))?;
        let plain = train(&last_cfg, &dir.join(format!("{name}_last")))?;
        let (vm, vl) = (
            merged.summary.final_val_loss.expect("run ends on a checkpoint"),
            plain.summary.final_val_loss.expect("run ends on a checkpoint"),
        );
        let (first_m, first_l) = (merged.log[0].loss, plain.log[0].loss);
        let gap = relative_gap(vm, vl);
        m.set(format!("{name}_merged_val"), vm);
        m.set(format!("{name}_last_val"), vl);
        m.set(format!("{name}_gap"), gap);
        m.set(format!("{name}_merged_step1_loss"), first_m);
        m.set(format!("{name}_last_step1_loss"), first_l);
        all_close &= gap <= MAX_GAP;
        all_lower &= first_m < first_l;
    }
    m.flag("ok.final_within_2pct", all_close);
    m.flag("ok.merged_lower_at_step1", all_lower);
    Ok(m.finish())
}
