//! Recovering from a learning-rate-induced loss spike with a merged restart.

use std::collections::BTreeMap;
use std::path::Path;

use pma_core::merge::MergeStrategy;
use pma_core::testbed::{
    detect_spike, pma_init_resume, train, InitSpec, ResumePoint, SpikeDirective, SpikeMode, TrainError,
};

use super::common::{base_config, decaying, median, relative_gap, Metrics, LR};
use super::{Criterion, RecipeOptions};

pub const STEPS: u64 = 3000;
pub const DECAY_FROM: u64 = 2000;
pub const SPIKE_AT: u64 = 1000;
pub const SPIKE_MULTIPLIER: f64 = 60.0;
pub const RESUME_N: usize = 3;
pub const MAX_GAP: f64 = 0.10;

pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion::new("ok.pma_rejoins", "PMA-init (n=3, SMA) resume ends within 10% of the unspiked reference", 0.7),
        Criterion::new(
            "ok.last_misses",
            "resume from the last checkpoint ends outside 10% of the reference (or diverges)",
            0.7,
        ),
    ]
}

pub fn run_seed(seed: u64, dir: &Path, _: &RecipeOptions) -> anyhow::Result<BTreeMap<String, f64>> {
    let cfg = base_config(seed, STEPS, decaying(DECAY_FROM, STEPS - DECAY_FROM, 0.05 * LR));
    let reference = train(&cfg, &dir.join("reference"))?;
    let ref_val = reference.summary.final_val_loss.expect("run ends on a checkpoint");

    let mut spiked_cfg = cfg.clone();
    spiked_cfg.spike = Some(SpikeDirective { mode: SpikeMode::HighLr, lr_multiplier: SPIKE_MULTIPLIER, at_step: SPIKE_AT });
    let spiked = train(&spiked_cfg, &dir.join("spiked"))?;

    let mut m = Metrics::default();
    m.set("reference_val", ref_val);
    let pre: Vec<f64> = spiked.log.iter().filter(|r| r.step <= SPIKE_AT).map(|r| r.loss).collect();
    m.set("pre_spike_median_loss", median(&pre));
    let post_max = spiked.log.iter().filter(|r| r.step > SPIKE_AT && r.loss.is_finite()).map(|r| r.loss).fold(0.0, f64::max);
    m.set("post_spike_max_loss", post_max);
    if let Some(step) = detect_spike(&spiked.log) {
        m.set("spike_detected_at", step as f64);
    }
    if let Some(step) = spiked.summary.diverged_at {
        m.set("spiked_diverged_at", step as f64);
    }

    let pma = pma_init_resume(
        &spiked.manifest,
        &spiked.out_dir,
        &spiked.log,
        RESUME_N,
        &MergeStrategy::Sma,
        &cfg,
        ResumePoint::BeforeSpike,
        &dir.join("resume_pma"),
    )?;
    let pma_val = pma.summary.final_val_loss.expect("resume ends on a checkpoint");
    m.set("pma_resume_start", pma.summary.start_step as f64);
    m.set("pma_val", pma_val);
    let pma_gap = relative_gap(pma_val, ref_val);
    m.set("pma_gap", pma_gap);
    m.flag("ok.pma_rejoins", pma_gap <= MAX_GAP);

    // Same restart recipe (fresh momentum, unspiked schedule), but from the
    // newest checkpoint the spiked run left behind.
    let last = spiked.manifest.last().ok_or_else(|| anyhow::anyhow!("spiked run wrote no checkpoints"))?;
    let mut last_cfg = cfg.clone();
    last_cfg.init = InitSpec::Checkpoint { path: spiked.checkpoint_path(last).to_string_lossy().into_owned(), load_momentum: false };
    last_cfg.start_step = last.step;
    m.set("last_resume_start", last.step as f64);
    let last_gap = match train(&last_cfg, &dir.join("resume_last")) {
        Ok(run) => {
            let v = run.summary.final_val_loss.expect("resume ends on a checkpoint");
            m.set("last_val", v);
            m.flag("last_diverged", false);
            relative_gap(v, ref_val)
        }
        Err(TrainError::Diverged { step, .. }) => {
            m.flag("last_diverged", true);
            m.set("last_diverged_at", step as f64);
            f64::INFINITY
        }
        Err(e) => return Err(e.into()),
    };
    m.set("last_gap", last_gap);
    m.flag("ok.last_misses", last_gap.is_nan() || last_gap > MAX_GAP);
    Ok(m.finish())
}
