//! Ablation over the number of merged checkpoints N and their spacing V.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use pma_core::merge::{MergeMode, MergeStrategy};
use pma_core::testbed::{train, Workbench};

use super::common::{base_config, plan_and_merge, stable, val_loss_of, Metrics};
use super::{Criterion, RecipeOptions};

pub const STEPS: u64 = 3000;
pub const CHECKPOINT_EVERY: u64 = 25;
pub const EARLY_ANCHOR: u64 = 1000;
pub const N_SWEEP: [usize; 4] = [3, 6, 10, 15];
pub const N_SWEEP_INTERVAL: u64 = 50;
pub const V_SWEEP: [u64; 4] = [25, 50, 100, 200];
pub const V_SWEEP_N: usize = 10;
pub const ABLATION_FILE: &str = "ablation.csv";

pub fn criteria() -> Vec<Criterion> {
    vec![Criterion::new("ok.n15_le_n3", "at the end of training, merging N=15 beats N=3", 0.7)]
}

pub fn run_seed(seed: u64, dir: &Path, _: &RecipeOptions) -> anyhow::Result<BTreeMap<String, f64>> {
    let mut cfg = base_config(seed, STEPS, stable(STEPS));
    cfg.checkpoint_every = CHECKPOINT_EVERY;
    let bench = Workbench::new(&cfg)?;
    let run = train(&cfg, &dir.join("train"))?;
    let out = dir.join("merged.pmat");

    let mut rows = Vec::new();
    for (label, anchor) in [("early", EARLY_ANCHOR), ("final", STEPS)] {
        for n in N_SWEEP {
            plan_and_merge(&run, &MergeStrategy::Sma, n, N_SWEEP_INTERVAL, Some(anchor), &out, MergeMode::InMemory)?;
            rows.push((label, anchor, n, N_SWEEP_INTERVAL, val_loss_of(&bench, &out)?));
        }
        for v in V_SWEEP {
            // Like a real run early on, long intervals may not fit N checkpoints.
            let n = V_SWEEP_N.min((anchor / v) as usize);
            plan_and_merge(&run, &MergeStrategy::Sma, n, v, Some(anchor), &out, MergeMode::InMemory)?;
            rows.push((label, anchor, n, v, val_loss_of(&bench, &out)?));
        }
    }

    let mut csv = String::from("anchor_step,n,interval_steps,val_loss\n");
    let mut m = Metrics::default();
    for &(label, anchor, n, v, loss) in &rows {
        writeln!(csv, "{anchor},{n},{v},{loss:?}").expect("string write");
        m.set(format!("val_{label}_n{n}_v{v}"), loss);
    }
    std::fs::write(dir.join(ABLATION_FILE), csv)?;
    m.set("final_val", run.summary.final_val_loss.expect("run ends on a checkpoint"));

    let at = |n: usize| {
        rows.iter()
            .find(|r| r.0 == "final" && r.2 == n && r.3 == N_SWEEP_INTERVAL)
            .map(|r| r.4)
            .expect("swept")
    };
    m.flag("ok.n15_le_n3", at(15) <= at(3));
    Ok(m.finish())
}
