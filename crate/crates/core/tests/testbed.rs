use std::path::Path;

use pma_core::merge::MergeStrategy;
use pma_core::store::Container;
use pma_core::testbed::{
    batch_indices, fork, l2_norm, lr_at, pma_init_resume, read_metrics, train, DataSpec, InitSpec, ModelKind,
    ModelSpec, ResumePoint, SpikeDirective, SpikeMode, TaskId, TrainConfig, TrainError, Workbench, WsdSchedule,
    METRICS_FILE,
};

fn mlp_config(seed: u64, steps: u64) -> TrainConfig {
    TrainConfig {
        seed,
        model: ModelSpec { kind: ModelKind::Mlp, layer_widths: vec![4, 16, 1] },
        data: DataSpec { task: TaskId::TeacherRegression, n_train: 256, n_val: 256, noise_std: 0.2 },
        steps,
        batch_size: 16,
        schedule: WsdSchedule { lr_peak: 0.05, lr_end: 0.005, warmup_steps: 20, stable_steps: steps / 2, decay_steps: steps - 20 - steps / 2 },
        checkpoint_every: 20,
        tokens_per_step: 512,
        spike: None,
        init: InitSpec::Random,
        start_step: 0,
    }
}

fn read_dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

#[test]
fn noiseless_linear_regression_converges() {
    let cfg = TrainConfig {
        seed: 5,
        model: ModelSpec { kind: ModelKind::LinearRegression, layer_widths: vec![6, 2] },
        data: DataSpec { task: TaskId::LinearRegression, n_train: 200, n_val: 100, noise_std: 0.0 },
        steps: 1500,
        batch_size: 20,
        schedule: WsdSchedule::constant(0.02, 1500),
        checkpoint_every: 100,
        tokens_per_step: 20,
        spike: None,
        init: InitSpec::Random,
        start_step: 0,
    };
    let dir = tempfile::tempdir().unwrap();
    let run = train(&cfg, dir.path()).unwrap();
    let bench = Workbench::new(&cfg).unwrap();
    assert!(bench.train_loss(&run.final_params) < 1e-6, "{}", bench.train_loss(&run.final_params));
    assert!(run.summary.final_val_loss.unwrap() < 1e-6);
}

#[test]
fn runs_are_byte_deterministic() {
    let cfg = mlp_config(11, 200);
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    train(&cfg, a.path()).unwrap();
    train(&cfg, b.path()).unwrap();
    let (fa, fb) = (read_dir_bytes(a.path()), read_dir_bytes(b.path()));
    assert!(fa.len() > 20);
    assert_eq!(fa, fb);
}

#[test]
fn log_columns_are_consistent() {
    let cfg = mlp_config(2, 100);
    let dir = tempfile::tempdir().unwrap();
    let run = train(&cfg, dir.path()).unwrap();
    let bench = Workbench::new(&cfg).unwrap();
    let on_disk = read_metrics(&dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(on_disk, run.log);
    for r in &run.log {
        assert_eq!(r.tokens, r.step * cfg.tokens_per_step);
        assert_eq!(r.lr, lr_at(&cfg.schedule, r.step - 1).unwrap());
        assert_eq!(r.val_loss.is_some(), r.step % cfg.checkpoint_every == 0);
    }
    // Recompute the logged gradient norm from a checkpoint and the batch of
    // the following step.
    let entry = &run.manifest.entries[1];
    let params = bench.load(run.checkpoint_path(entry)).unwrap();
    let next = run.log.iter().find(|r| r.step == entry.step + 1).unwrap();
    let rows = batch_indices(cfg.seed, entry.step, cfg.batch_size, cfg.data.n_train);
    let (loss, grad) = bench.model.loss_and_grad(&params, &bench.splits.train, &rows);
    assert!((l2_norm(&grad) - next.grad_norm).abs() <= 1e-12 * next.grad_norm.max(1.0));
    assert!((loss - next.loss).abs() <= 1e-12 * next.loss.max(1.0));
    for e in &run.manifest.entries {
        let c = Container::open(run.checkpoint_path(e)).unwrap();
        assert_eq!((c.step(), c.tokens()), (e.step, e.tokens));
        assert_eq!(e.tokens, e.step * cfg.tokens_per_step);
    }
}

#[test]
fn fork_with_same_schedule_replays_original_bytes() {
    let cfg = mlp_config(4, 200);
    let base = tempfile::tempdir().unwrap();
    let run = train(&cfg, base.path()).unwrap();
    let forked_cfg = fork(&run.manifest, base.path(), &cfg, 100 * cfg.tokens_per_step, None).unwrap();
    assert_eq!(forked_cfg.start_step, 100);
    let fdir = tempfile::tempdir().unwrap();
    let forked = train(&forked_cfg, fdir.path()).unwrap();
    assert_eq!(forked.final_params, run.final_params);
    for e in &forked.manifest.entries {
        let original = run.manifest.find_step(e.step).unwrap();
        assert_eq!(
            std::fs::read(forked.checkpoint_path(e)).unwrap(),
            std::fs::read(run.checkpoint_path(original)).unwrap()
        );
    }
    let tail: Vec<_> = run.log.iter().filter(|r| r.step > 100).cloned().collect();
    assert_eq!(forked.log, tail);
}

#[test]
fn fork_into_decay_follows_new_schedule() {
    let cfg = mlp_config(4, 200);
    let base = tempfile::tempdir().unwrap();
    let run = train(&cfg, base.path()).unwrap();
    // Halfway through the stable phase.
    let at = cfg.schedule.warmup_steps + cfg.schedule.stable_steps / 2;
    let at = at - at % cfg.checkpoint_every;
    let decay = WsdSchedule { lr_peak: 0.05, lr_end: 0.0, warmup_steps: 20, stable_steps: at - 20, decay_steps: 200 - at };
    let forked_cfg = fork(&run.manifest, base.path(), &cfg, at * cfg.tokens_per_step, Some(decay.clone())).unwrap();
    let fdir = tempfile::tempdir().unwrap();
    let forked = train(&forked_cfg, fdir.path()).unwrap();
    assert_eq!(forked.log[0].lr, 0.05);
    assert!(forked.log.windows(2).all(|w| w[1].lr <= w[0].lr));
    assert!(forked.log.last().unwrap().lr < 1e-3);
    assert_eq!(forked.log.last().unwrap().lr, lr_at(&decay, 199).unwrap());
}

#[test]
fn fork_far_from_any_checkpoint_fails() {
    let cfg = mlp_config(4, 100);
    let base = tempfile::tempdir().unwrap();
    let run = train(&cfg, base.path()).unwrap();
    let far = 10_000 * cfg.tokens_per_step;
    assert!(matches!(fork(&run.manifest, base.path(), &cfg, far, None), Err(TrainError::NoCheckpointNear(_))));
    let between = 30 * cfg.tokens_per_step;
    assert!(fork(&run.manifest, base.path(), &cfg, between, None).is_ok());
}

#[test]
fn single_checkpoint_pma_init_equals_plain_resume() {
    let cfg = mlp_config(8, 200);
    let base = tempfile::tempdir().unwrap();
    let run = train(&cfg, base.path()).unwrap();
    let mut resume_cfg = cfg.clone();
    resume_cfg.steps = 200;
    let pdir = tempfile::tempdir().unwrap();
    // Resume from the checkpoint at step 100 via a truncated manifest.
    let mut manifest = run.manifest.clone();
    manifest.entries.retain(|e| e.step <= 100);
    let pma = pma_init_resume(&manifest, base.path(), &[], 1, &MergeStrategy::Sma, &resume_cfg, ResumePoint::Latest, pdir.path()).unwrap();

    let mut plain_cfg = resume_cfg.clone();
    plain_cfg.init = InitSpec::Checkpoint { path: base.path().join("ckpt_00000100.pmat").to_string_lossy().into(), load_momentum: false };
    plain_cfg.start_step = 100;
    let ldir = tempfile::tempdir().unwrap();
    let plain = train(&plain_cfg, ldir.path()).unwrap();
    assert_eq!(pma.final_params, plain.final_params);
    assert_eq!(pma.log, plain.log);
}

#[test]
fn spike_runs_blow_up_in_most_seeds() {
    let spike_at = 100;
    let mut spiked_seeds = 0;
    for seed in 0..10 {
        let mut cfg = mlp_config(seed, 200);
        cfg.spike = Some(SpikeDirective { mode: SpikeMode::HighLr, lr_multiplier: 60.0, at_step: spike_at });
        let dir = tempfile::tempdir().unwrap();
        let run = train(&cfg, dir.path()).unwrap();
        assert!(run.summary.spike_configured);
        let median = |mut v: Vec<f64>| {
            v.sort_by(f64::total_cmp);
            v[v.len() / 2]
        };
        let pre = |f: fn(&pma_core::testbed::StepRecord) -> f64| {
            median(run.log.iter().filter(|r| r.step <= spike_at).map(f).collect())
        };
        let post_max = |f: fn(&pma_core::testbed::StepRecord) -> f64| {
            run.log.iter().filter(|r| r.step > spike_at).map(f).filter(|v| v.is_finite()).fold(0.0, f64::max)
        };
        let grad_spiked = post_max(|r| r.grad_norm) > 5.0 * pre(|r| r.grad_norm);
        let loss_spiked = post_max(|r| r.loss) > 5.0 * pre(|r| r.loss);
        spiked_seeds += (grad_spiked && loss_spiked) as usize;
    }
    assert!(spiked_seeds >= 7, "{spiked_seeds}/10 seeds spiked");
}

#[test]
fn divergence_without_spike_is_an_error_with_partial_outputs() {
    let mut cfg = mlp_config(1, 200);
    cfg.schedule = WsdSchedule::constant(50.0, 200);
    let dir = tempfile::tempdir().unwrap();
    let err = train(&cfg, dir.path()).unwrap_err();
    assert!(matches!(err, TrainError::Diverged { .. }), "{err}");
    assert!(err.to_string().contains("diverged"));
    assert!(dir.path().join(METRICS_FILE).exists());
}

#[test]
fn pma_init_keeps_momentum_when_asked() {
    let cfg = mlp_config(3, 100);
    let base = tempfile::tempdir().unwrap();
    let run = train(&cfg, base.path()).unwrap();
    let paths: Vec<String> = run.manifest.entries[2..5].iter().map(|e| run.checkpoint_path(e).to_string_lossy().into()).collect();
    let mut a = cfg.clone();
    a.start_step = 100 - 20;
    a.steps = 100;
    a.init = InitSpec::PmaInit { paths: paths.clone(), strategy: MergeStrategy::Sma, reset_momentum: true };
    let mut b = a.clone();
    b.init = InitSpec::PmaInit { paths, strategy: MergeStrategy::Sma, reset_momentum: false };
    let (da, db) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let (ra, rb) = (train(&a, da.path()).unwrap(), train(&b, db.path()).unwrap());
    assert_eq!(ra.log[0].loss, rb.log[0].loss);
    assert_ne!(ra.final_params, rb.final_params);
}
