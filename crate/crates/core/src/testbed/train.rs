use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::{InitSpec, TrainConfig};
use super::data::{batch_indices, generate, Splits};
use super::model::{l2_norm, LossKind, Model};
use super::schedule::lr_at;
use super::TrainError;
use crate::merge::{compute_weights, merge, MergeMode};
use crate::store::{write_container, Container, ManifestEntry, TrajectoryManifest, MANIFEST_FILE};

pub const MOMENTUM: f64 = 0.9;
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const PMA_INIT_FILE: &str = "pma_init.pmat";

/// One optimizer update. `step` counts completed updates after it; `loss`,
/// `grad_norm` and `lr` belong to the update itself, so `loss` is measured
/// on the parameters after `step - 1` updates.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub tokens: u64,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
    /// Full validation loss, recorded at checkpoint steps only.
    pub val_loss: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub start_step: u64,
    pub end_step: u64,
    pub spike_configured: bool,
    /// Step of the first update whose loss or gradient was non-finite.
    pub diverged_at: Option<u64>,
    pub final_val_loss: Option<f64>,
    pub max_grad_norm: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub out_dir: PathBuf,
    pub manifest: TrajectoryManifest,
    pub log: Vec<StepRecord>,
    pub summary: TrainSummary,
    pub final_params: Vec<f64>,
}

impl TrainRun {
    pub fn manifest_path(&self) -> PathBuf {
        self.out_dir.join(MANIFEST_FILE)
    }

    /// Checkpoint path for a manifest entry, resolved against the run directory.
    pub fn checkpoint_path(&self, entry: &ManifestEntry) -> PathBuf {
        self.out_dir.join(&entry.checkpoint_path)
    }
}

pub fn checkpoint_name(step: u64) -> String {
    format!("ckpt_{step:08}.pmat")
}

/// Momentum buffer stored next to each checkpoint.
pub fn momentum_path(checkpoint: &Path) -> PathBuf {
    checkpoint.with_extension("momentum.pmat")
}

/// Model and data splits for a config, built once and reused for evaluation.
#[derive(Debug, Clone)]
pub struct Workbench {
    pub model: Model,
    pub splits: Splits,
}

impl Workbench {
    pub fn new(config: &TrainConfig) -> Result<Self, TrainError> {
        config.model.validate()?;
        let loss = if config.data.task.is_classification() {
            LossKind::CrossEntropy
        } else {
            LossKind::SquaredError
        };
        let model = Model::new(config.model.clone(), loss)?;
        let splits = generate(&config.data, config.model.input_dim(), config.model.output_dim(), config.seed)?;
        Ok(Self { model, splits })
    }

    pub fn val_loss(&self, params: &[f64]) -> f64 {
        self.model.dataset_loss(params, &self.splits.val)
    }

    pub fn train_loss(&self, params: &[f64]) -> f64 {
        self.model.dataset_loss(params, &self.splits.train)
    }

    pub fn load(&self, checkpoint: impl AsRef<Path>) -> Result<Vec<f64>, TrainError> {
        let c = Container::open(checkpoint)?;
        self.model.params_from_container(&c)
    }

    /// Gradient of the batch a run would draw at 0-based step `step`.
    pub fn batch_loss_and_grad(&self, config: &TrainConfig, params: &[f64], step: u64) -> (f64, Vec<f64>) {
        let rows = batch_indices(config.seed, step, config.batch_size, self.splits.train.len());
        self.model.loss_and_grad(params, &self.splits.train, &rows)
    }
}

fn initial_state(config: &TrainConfig, bench: &Workbench, out_dir: &Path) -> Result<(Vec<f64>, Vec<f64>), TrainError> {
    let zeros = vec![0.0; bench.model.num_params()];
    match &config.init {
        InitSpec::Random => Ok((bench.model.init_params(config.seed), zeros)),
        InitSpec::Checkpoint { path, load_momentum } => {
            let params = bench.load(path)?;
            let momentum = if *load_momentum { bench.load(momentum_path(Path::new(path)))? } else { zeros };
            Ok((params, momentum))
        }
        InitSpec::PmaInit { paths, strategy, reset_momentum } => {
            let weights = compute_weights(strategy, paths.len())?;
            let merged = out_dir.join(PMA_INIT_FILE);
            merge(paths, &weights, strategy, &merged, MergeMode::InMemory)?;
            let params = bench.load(&merged)?;
            let momentum = if *reset_momentum {
                zeros
            } else {
                let sidecars: Vec<PathBuf> = paths.iter().map(|p| momentum_path(Path::new(p))).collect();
                let merged_m = momentum_path(&merged);
                merge(&sidecars, &weights, strategy, &merged_m, MergeMode::InMemory)?;
                bench.load(&merged_m)?
            };
            Ok((params, momentum))
        }
    }
}

fn checkpoint_metadata(step: u64, tokens: u64) -> std::collections::BTreeMap<String, String> {
    std::collections::BTreeMap::from([
        ("step".to_string(), step.to_string()),
        ("tokens".to_string(), tokens.to_string()),
    ])
}

/// Runs mini-batch SGD with momentum and records a trajectory in `out_dir`.
///
/// Writes `trajectory.json`, `metrics.csv`, `summary.json` and one
/// checkpoint (plus momentum sidecar) every `checkpoint_every` steps. A
/// non-finite loss ends the run; without a spike directive that is a
/// [`TrainError::Diverged`] after the partial outputs are written.
pub fn train(config: &TrainConfig, out_dir: &Path) -> Result<TrainRun, TrainError> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let bench = Workbench::new(config)?;
    let (mut params, mut velocity) = initial_state(config, &bench, out_dir)?;

    let mut manifest = TrajectoryManifest::new();
    let mut log = Vec::with_capacity((config.steps - config.start_step) as usize);
    let mut diverged_at = None;
    let n_train = bench.splits.train.len();

    for step in config.start_step..config.steps {
        let mut lr = lr_at(&config.schedule, step)?;
        if let Some(spike) = &config.spike {
            if step >= spike.at_step {
                lr *= spike.lr_multiplier;
            }
        }
        let rows = batch_indices(config.seed, step, config.batch_size, n_train);
        let (loss, grad) = bench.model.loss_and_grad(&params, &bench.splits.train, &rows);
        let grad_norm = l2_norm(&grad);
        let done = step + 1;
        let tokens = done * config.tokens_per_step;
        let mut record = StepRecord { step: done, tokens, lr, loss, grad_norm, val_loss: None };
        if !loss.is_finite() || !grad_norm.is_finite() {
            log.push(record);
            diverged_at = Some(done);
            break;
        }
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&grad) {
            *v = MOMENTUM * *v + g;
            *p -= lr * *v;
        }
        if done % config.checkpoint_every == 0 {
            if params.iter().any(|p| !p.is_finite()) {
                log.push(record);
                diverged_at = Some(done);
                break;
            }
            let name = checkpoint_name(done);
            let path = out_dir.join(&name);
            let meta = checkpoint_metadata(done, tokens);
            write_container(&bench.model.to_tensors(&params), &meta, &path)?;
            write_container(&bench.model.to_tensors(&velocity), &meta, &momentum_path(&path))?;
            record.val_loss = Some(bench.val_loss(&params));
            manifest.push(ManifestEntry {
                checkpoint_path: name,
                step: done,
                tokens,
                lr,
                train_loss: loss,
                grad_norm,
            })?;
        }
        log.push(record);
    }

    let summary = TrainSummary {
        start_step: config.start_step,
        end_step: log.last().map_or(config.start_step, |r| r.step),
        spike_configured: config.spike.is_some(),
        diverged_at,
        final_val_loss: log.iter().rev().find_map(|r| r.val_loss),
        max_grad_norm: log.iter().map(|r| r.grad_norm).fold(0.0, f64::max),
    };
    manifest.save(out_dir.join(MANIFEST_FILE))?;
    write_metrics(&log, &out_dir.join(METRICS_FILE))?;
    let mut text = serde_json::to_string_pretty(&summary).map_err(|e| TrainError::Config(e.to_string()))?;
    text.push('\n');
    std::fs::write(out_dir.join(SUMMARY_FILE), text)?;

    if let Some(step) = diverged_at {
        if config.spike.is_none() {
            return Err(TrainError::Diverged { step, out_dir: out_dir.to_path_buf() });
        }
    }
    Ok(TrainRun { out_dir: out_dir.to_path_buf(), manifest, log, summary, final_params: params })
}

pub fn write_metrics(log: &[StepRecord], path: &Path) -> Result<(), TrainError> {
    let mut out = String::from("step,tokens,lr,loss,grad_norm,val_loss\n");
    for r in log {
        let val = r.val_loss.map(|v| format!("{v:?}")).unwrap_or_default();
        writeln!(out, "{},{},{:?},{:?},{:?},{}", r.step, r.tokens, r.lr, r.loss, r.grad_norm, val).expect("string write");
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<Vec<StepRecord>, TrainError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != "step,tokens,lr,loss,grad_norm,val_loss" {
        return Err(TrainError::Metrics(format!("unexpected header {header:?}")));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(TrainError::Metrics(format!("line {}: expected 6 fields", i + 2)));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| TrainError::Metrics(format!("line {}: {e}", i + 2)));
            let int = |s: &str| s.parse::<u64>().map_err(|e| TrainError::Metrics(format!("line {}: {e}", i + 2)));
            Ok(StepRecord {
                step: int(f[0])?,
                tokens: int(f[1])?,
                lr: num(f[2])?,
                loss: num(f[3])?,
                grad_norm: num(f[4])?,
                val_loss: if f[5].is_empty() { None } else { Some(num(f[5])?) },
            })
        })
        .collect()
}
