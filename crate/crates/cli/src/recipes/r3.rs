//! Late-training merges under different weighting schemes.

use std::collections::BTreeMap;
use std::path::Path;

use pma_core::merge::{MergeMode, MergeStrategy};
use pma_core::testbed::{train, Workbench};

use super::common::{base_config, plan_and_merge, stable, val_loss_of, Metrics, CHECKPOINT_EVERY};
use super::{Criterion, RecipeOptions};

pub const STEPS: u64 = 3000;
pub const BATCH: usize = 64;
pub const MERGE_N: usize = 10;
pub const MAX_SPREAD: f64 = 0.02;

pub fn strategies() -> Vec<(&'static str, MergeStrategy)> {
    vec![
        ("sma", MergeStrategy::Sma),
        ("wma", MergeStrategy::Wma),
        ("ema_0.1", MergeStrategy::Ema { alpha: 0.1 }),
        ("ema_0.2", MergeStrategy::Ema { alpha: 0.2 }),
    ]
}

pub fn criteria() -> Vec<Criterion> {
    vec![Criterion::new("ok.spread_le_2pct", "SMA/WMA/EMA(0.1)/EMA(0.2) val losses within 2% (max-min)/min", 0.8)]
}

pub fn run_seed(seed: u64, dir: &Path, _: &RecipeOptions) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut cfg = base_config(seed, STEPS, stable(STEPS));
    cfg.batch_size = BATCH;
    let bench = Workbench::new(&cfg)?;
    let run = train(&cfg, &dir.join("train"))?;

    let mut m = Metrics::default();
    let mut vals = Vec::new();
    for (name, strategy) in strategies() {
        let out = dir.join(format!("merged_{name}.pmat"));
        plan_and_merge(&run, &strategy, MERGE_N, CHECKPOINT_EVERY, None, &out, MergeMode::InMemory)?;
        let v = val_loss_of(&bench, &out)?;
        m.set(format!("val_{name}"), v);
        vals.push(v);
    }
    let max = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = vals.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = (max - min) / min;
    m.set("final_val", run.summary.final_val_loss.expect("run ends on a checkpoint"));
    m.set("spread", spread);
    m.flag("ok.spread_le_2pct", spread <= MAX_SPREAD);
    Ok(m.finish())
}
