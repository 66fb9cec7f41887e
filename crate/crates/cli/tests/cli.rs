use std::path::Path;
use std::process::{Command, Output};

use pma_core::merge::MergeReport;
use pma_core::planner::MergePlan;
use pma_core::store::{ManifestEntry, TrajectoryManifest};
use pma_core::testbed::{
    DataSpec, InitSpec, ModelKind, ModelSpec, SpikeDirective, SpikeMode, TaskId, TrainConfig, TrainSummary, WsdSchedule,
};

fn pma(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pma")).args(args).env_remove("PMA_THREADS").output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(seed: u64) -> TrainConfig {
    TrainConfig {
        seed,
        model: ModelSpec { kind: ModelKind::Mlp, layer_widths: vec![3, 8, 1] },
        data: DataSpec { task: TaskId::TeacherRegression, n_train: 128, n_val: 64, noise_std: 0.1 },
        steps: 200,
        batch_size: 8,
        schedule: WsdSchedule::constant(0.05, 200),
        checkpoint_every: 10,
        tokens_per_step: 100,
        spike: None,
        init: InitSpec::Random,
        start_step: 0,
    }
}

fn train_into(dir: &Path, cfg: &TrainConfig) -> Output {
    let cfg_path = dir.join("cfg.json");
    cfg.save(&cfg_path).unwrap();
    pma(&["train", "--config", cfg_path.to_str().unwrap(), "--out", dir.join("run").to_str().unwrap()])
}

#[test]
fn train_writes_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let o = train_into(dir.path(), &small_config(1));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = TrajectoryManifest::load(dir.path().join("run/trajectory.json")).unwrap();
    assert_eq!(m.len(), 20);
    assert!(dir.path().join("run/metrics.csv").exists());
}

#[test]
fn train_missing_config_fails() {
    let dir = tempfile::tempdir().unwrap();
    let o = pma(&["train", "--config", "/nonexistent/cfg.json", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("cannot read /nonexistent/cfg.json"), "{}", stderr(&o));
}

#[test]
fn spike_run_completes_and_is_flagged() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(2);
    cfg.spike = Some(SpikeDirective { mode: SpikeMode::HighLr, lr_multiplier: 60.0, at_step: 100 });
    let o = train_into(dir.path(), &cfg);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let s: TrainSummary = serde_json::from_str(&std::fs::read_to_string(dir.path().join("run/summary.json")).unwrap()).unwrap();
    assert!(s.spike_configured);
}

#[test]
fn divergence_without_spike_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = small_config(2);
    cfg.schedule = WsdSchedule::constant(80.0, 200);
    let o = train_into(dir.path(), &cfg);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("diverged"), "{}", stderr(&o));
}

#[test]
fn plan_then_merge() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_into(dir.path(), &small_config(3)).status.code(), Some(0));
    let manifest = dir.path().join("run/trajectory.json");
    let plan_path = dir.path().join("plan.json");
    let o = pma(&[
        "plan", "--manifest", manifest.to_str().unwrap(), "--n", "4", "--interval-tokens", "2e3",
        "--strategy", "ema", "--alpha", "0.2", "--out", plan_path.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let p: MergePlan = serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert_eq!(p.resolved.iter().map(|e| e.tokens).collect::<Vec<_>>(), [14_000, 16_000, 18_000, 20_000]);

    let out = dir.path().join("merged.pmat");
    let o = pma(&["merge", "--plan", plan_path.to_str().unwrap(), "--mode", "streaming", "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let from_plan = std::fs::read(&out).unwrap();

    let out2 = dir.path().join("merged2.pmat");
    let o = pma(&[
        "merge", "--manifest", manifest.to_str().unwrap(), "--n", "4", "--interval-tokens", "2000",
        "--strategy", "ema", "--alpha", "0.2", "--out", out2.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(&out2).unwrap(), from_plan);
    let report: MergeReport = serde_json::from_str(&std::fs::read_to_string(dir.path().join("merged.pmat.report.json")).unwrap()).unwrap();
    assert_eq!(report.inputs.len(), 4);
}

#[test]
fn plan_with_one_entry() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_into(dir.path(), &small_config(4)).status.code(), Some(0));
    let plan_path = dir.path().join("plan.json");
    let manifest = dir.path().join("run/trajectory.json");
    let o = pma(&["plan", "--manifest", manifest.to_str().unwrap(), "--n", "1", "--interval-tokens", "5000", "--out", plan_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let p: MergePlan = serde_json::from_str(&std::fs::read_to_string(&plan_path).unwrap()).unwrap();
    assert_eq!(p.resolved.len(), 1);
    assert_eq!(p.resolved[0].step, 200);
}

#[test]
fn plan_errors_carry_module_message() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_into(dir.path(), &small_config(4)).status.code(), Some(0));
    let manifest = dir.path().join("run/trajectory.json");
    let o = pma(&["plan", "--manifest", manifest.to_str().unwrap(), "--n", "50", "--interval-tokens", "1000", "--out", dir.path().join("p.json").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("insufficient history"), "{}", stderr(&o));
}

#[test]
fn merging_identical_checkpoints_reproduces_input() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_into(dir.path(), &small_config(5)).status.code(), Some(0));
    let ckpt = dir.path().join("run/ckpt_00000100.pmat");
    let mut m = TrajectoryManifest::new();
    for i in 1..=3u64 {
        m.push(ManifestEntry { checkpoint_path: ckpt.to_string_lossy().into(), step: i, tokens: i * 10, lr: 0.1, train_loss: 1.0, grad_norm: 1.0 }).unwrap();
    }
    m.save(dir.path().join("same.json")).unwrap();
    let plan_path = dir.path().join("plan.json");
    let o = pma(&["plan", "--manifest", dir.path().join("same.json").to_str().unwrap(), "--n", "3", "--interval-tokens", "10", "--out", plan_path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = dir.path().join("m.pmat");
    let o = pma(&["merge", "--plan", plan_path.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    // Testbed checkpoints are f64, where the weighted sum may differ from the
    // input in the last place.
    let a = pma_core::store::Container::open(&ckpt).unwrap();
    let b = pma_core::store::Container::open(&out).unwrap();
    assert!(a.tensors.keys().eq(b.tensors.keys()));
    for name in a.tensors.keys() {
        let (x, y) = (a.load_tensor(name).unwrap(), b.load_tensor(name).unwrap());
        assert_eq!(x.len(), y.len());
        for (u, v) in x.iter().zip(&y) {
            assert!((u - v).abs() <= 4.0 * f64::EPSILON * u.abs(), "{name}: {u} vs {v}");
        }
    }
}

#[test]
fn merge_inputs_with_custom_weights() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(train_into(dir.path(), &small_config(6)).status.code(), Some(0));
    let a = dir.path().join("run/ckpt_00000010.pmat");
    let b = dir.path().join("run/ckpt_00000020.pmat");
    let out = dir.path().join("m.pmat");
    let o = pma(&[
        "merge", "--inputs", a.to_str().unwrap(), b.to_str().unwrap(), "--strategy", "custom", "--weights", "1,3",
        "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ca = pma_core::store::Container::open(&a).unwrap().load_tensor("layers.0.bias").unwrap();
    let cb = pma_core::store::Container::open(&b).unwrap().load_tensor("layers.0.bias").unwrap();
    let m = pma_core::store::Container::open(&out).unwrap().load_tensor("layers.0.bias").unwrap();
    for ((x, y), z) in ca.iter().zip(&cb).zip(&m) {
        assert_eq!(*z, 0.25 * x + 0.75 * y);
    }
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(pma(&[]).status.code(), Some(1));
    assert_eq!(pma(&["merge", "--strategy", "median", "--out", "x"]).status.code(), Some(1));
    assert_eq!(pma(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let o = pma(&["recipe", "R42", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown recipe"));
}

#[test]
fn recommend_interval_prints_tokens() {
    let o = pma(&["recommend-interval", "--params", "13e9"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "8000000000");
}

#[test]
fn recipe_writes_results() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_pma"))
        .args(["recipe", "r7", "--seeds", "0,3", "--instances", "20", "--out", dir.path().to_str().unwrap()])
        .env("PMA_THREADS", "1")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let r: pma_cli::recipes::RecipeResult =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("result.json")).unwrap()).unwrap();
    assert_eq!(r.seeds, [0, 3]);
    assert!(r.pass);
    assert!(dir.path().join("seeds.csv").exists());
    assert!(dir.path().join("seed_3/instances.csv").exists());
    assert!(dir.path().join("seed_3/surface.csv").exists());
}

#[test]
fn bad_thread_count_is_a_runtime_error() {
    let o = Command::new(env!("CARGO_BIN_EXE_pma"))
        .args(["recommend-interval", "--params", "1"])
        .env("PMA_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
}

/// The N/V ablation is not part of the acceptance gate; it is checked here.
#[test]
fn recipe_r4_more_checkpoints_help_late() {
    let dir = tempfile::tempdir().unwrap();
    let r = pma_cli::recipes::run_recipe("R4", &pma_cli::recipes::RecipeOptions::new((0..10).collect(), dir.path())).unwrap();
    for line in r.summary_lines() {
        println!("{line}");
    }
    assert!(r.pass);
    assert!(dir.path().join("seed_0/ablation.csv").exists());
}
