//! Merging at constant learning rate against a genuinely annealed run.

use std::collections::BTreeMap;
use std::path::Path;

use pma_core::merge::{MergeMode, MergeStrategy};
use pma_core::testbed::{fork, train, Workbench};

use super::common::{
    base_config, decaying, plan_and_merge, relative_gap, stable, tokens, val_loss_of, Metrics, CHECKPOINT_EVERY,
};
use super::{Criterion, RecipeOptions};

pub const FORK_STEP: u64 = 2000;
pub const DECAY_STEPS: u64 = 1000;
pub const MERGE_N: usize = 10;
pub const MAX_GAP: f64 = 0.05;

pub fn criteria() -> Vec<Criterion> {
    vec![Criterion::new("ok.within_5pct", "constant-lr SMA within 5% of the annealed run at the fork end", 0.7)]
}

pub fn run_seed(seed: u64, dir: &Path, _: &RecipeOptions) -> anyhow::Result<BTreeMap<String, f64>> {
    let end = FORK_STEP + DECAY_STEPS;
    let cfg = base_config(seed, end, stable(end));
    let bench = Workbench::new(&cfg)?;
    // The constant branch is the base run itself; forking it with its own
    // schedule would replay the same bytes.
    let constant = train(&cfg, &dir.join("constant"))?;
    let anneal_cfg = fork(&constant.manifest, &constant.out_dir, &cfg, tokens(FORK_STEP), Some(decaying(FORK_STEP, DECAY_STEPS, 0.0)))?;
    let annealed = train(&anneal_cfg, &dir.join("anneal"))?;

    let merged = dir.join("merged.pmat");
    plan_and_merge(&constant, &MergeStrategy::Sma, MERGE_N, CHECKPOINT_EVERY, None, &merged, MergeMode::InMemory)?;
    let merged_val = val_loss_of(&bench, &merged)?;
    let anneal_val = annealed.summary.final_val_loss.expect("annealed run ends on a checkpoint");
    let constant_val = constant.summary.final_val_loss.expect("run ends on a checkpoint");
    let gap = relative_gap(merged_val, anneal_val);

    let mut m = Metrics::default();
    m.set("anneal_val", anneal_val);
    m.set("merged_val", merged_val);
    m.set("constant_final_val", constant_val);
    m.set("relative_gap", gap);
    m.flag("ok.within_5pct", gap <= MAX_GAP);
    Ok(m.finish())
}
