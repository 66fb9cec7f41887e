//! Stable-phase merging: does an average of recent checkpoints beat them?

use std::collections::BTreeMap;
use std::path::Path;

use pma_core::merge::{MergeMode, MergeStrategy};
use pma_core::testbed::{train, Workbench};

use super::common::{base_config, mean, plan_and_merge, plan_paths, stable, val_loss_of, Metrics, CHECKPOINT_EVERY};
use super::{Criterion, RecipeOptions};

pub const STEPS: u64 = 3000;
pub const MERGE_N: usize = 10;

pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion::new("ok.merged_le_mean", "SMA merge val loss <= mean of its members", 0.9),
        Criterion::new("ok.merged_le_final", "SMA merge val loss <= final checkpoint", 0.8),
    ]
}

pub fn run_seed(seed: u64, dir: &Path, _: &RecipeOptions) -> anyhow::Result<BTreeMap<String, f64>> {
    let cfg = base_config(seed, STEPS, stable(STEPS));
    let bench = Workbench::new(&cfg)?;
    let run = train(&cfg, &dir.join("train"))?;
    let merged = dir.join("merged.pmat");
    let p = plan_and_merge(&run, &MergeStrategy::Sma, MERGE_N, CHECKPOINT_EVERY, None, &merged, MergeMode::Streaming)?;

    let members = plan_paths(&p)
        .iter()
        .map(|c| val_loss_of(&bench, c))
        .collect::<anyhow::Result<Vec<f64>>>()?;
    let merged_val = val_loss_of(&bench, &merged)?;
    let final_val = *members.last().expect("plan is non-empty");
    let member_mean = mean(&members);

    let mut m = Metrics::default();
    m.set("merged_val", merged_val);
    m.set("member_mean_val", member_mean);
    m.set("final_val", final_val);
    m.set("best_member_val", members.iter().copied().fold(f64::INFINITY, f64::min));
    m.flag("ok.merged_le_mean", merged_val <= member_mean);
    m.flag("ok.merged_le_final", merged_val <= final_val);
    Ok(m.finish())
}
