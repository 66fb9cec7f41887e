//! Scripted multi-seed experiments.
//!
//! Each recipe trains small models under [`pma_core::testbed`], merges
//! checkpoints and reduces every seed to a flat map of metrics. Pass/fail
//! is decided afterwards from indicator metrics alone, so the verdict can be
//! recomputed from `result.json` without rerunning anything.

mod common;
mod r1;
mod r2;
mod r3;
mod r4;
mod r5;
mod r6;
mod r7;

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use r7::DEFAULT_INSTANCES_PER_SEED;

pub const RESULT_FILE: &str = "result.json";
pub const SEEDS_FILE: &str = "seeds.csv";
pub const RECIPE_IDS: [&str; 7] = ["R1", "R2", "R3", "R4", "R5", "R6", "R7"];

#[derive(Debug, Error)]
pub enum RecipeError {
    #[error("unknown recipe {0:?} (expected one of R1..R7)")]
    Unknown(String),
    #[error("no seeds given")]
    NoSeeds,
    #[error("seed {seed} failed: {message} (partial results in {})", out_dir.display())]
    SeedFailed { seed: u64, message: String, out_dir: PathBuf },
    #[error("writing results: {0}")]
    Io(#[from] std::io::Error),
    #[error("writing results: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone)]
pub struct RecipeOptions {
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    /// Random quadratic instances per seed (R7 only).
    pub instances_per_seed: usize,
}

impl RecipeOptions {
    pub fn new(seeds: Vec<u64>, out_dir: impl Into<PathBuf>) -> Self {
        Self { seeds, out_dir: out_dir.into(), instances_per_seed: r7::DEFAULT_INSTANCES_PER_SEED }
    }
}

/// Metrics produced by one seed. Keys starting with `ok.` are 0/1
/// indicators that criteria count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub metrics: BTreeMap<String, f64>,
}

impl SeedMetrics {
    pub fn get(&self, key: &str) -> Option<f64> {
        self.metrics.get(key).copied()
    }

    pub fn indicator(&self, key: &str) -> bool {
        self.get(key) == Some(1.0)
    }
}

/// A per-seed indicator that must hold in at least `min_fraction` of seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Criterion {
    pub indicator: String,
    pub description: String,
    pub min_fraction: f64,
}

impl Criterion {
    pub fn new(indicator: &str, description: &str, min_fraction: f64) -> Self {
        Self { indicator: indicator.into(), description: description.into(), min_fraction }
    }

    /// Seeds needed out of `total`, e.g. 9 of 10 for a fraction of 0.9.
    pub fn required(&self, total: usize) -> usize {
        ((self.min_fraction * total as f64) - 1e-9).ceil().max(0.0) as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionOutcome {
    #[serde(flatten)]
    pub criterion: Criterion,
    pub passed: usize,
    pub required: usize,
    pub total: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecipeResult {
    pub recipe_id: String,
    pub seeds: Vec<u64>,
    pub per_seed: Vec<SeedMetrics>,
    pub criteria: Vec<CriterionOutcome>,
    pub pass: bool,
    /// Seeds that failed to run, with their error messages.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub failures: BTreeMap<u64, String>,
}

impl RecipeResult {
    /// Aggregates per-seed metrics against `criteria`.
    pub fn evaluate(recipe_id: &str, seeds: &[u64], per_seed: Vec<SeedMetrics>, criteria: &[Criterion]) -> Self {
        let total = seeds.len();
        let outcomes: Vec<CriterionOutcome> = criteria
            .iter()
            .map(|c| {
                let passed = per_seed.iter().filter(|s| s.indicator(&c.indicator)).count();
                let required = c.required(total);
                CriterionOutcome { criterion: c.clone(), passed, required, total, pass: passed >= required }
            })
            .collect();
        let pass = per_seed.len() == total && outcomes.iter().all(|o| o.pass);
        Self {
            recipe_id: recipe_id.to_string(),
            seeds: seeds.to_vec(),
            per_seed,
            criteria: outcomes,
            pass,
            failures: BTreeMap::new(),
        }
    }

    /// One line per criterion, e.g. `merged_le_mean: 10/10 (need 9) PASS`.
    pub fn summary_lines(&self) -> Vec<String> {
        self.criteria
            .iter()
            .map(|o| {
                format!(
                    "{}: {}/{} (need {}) {} - {}",
                    o.criterion.indicator,
                    o.passed,
                    o.total,
                    o.required,
                    if o.pass { "PASS" } else { "FAIL" },
                    o.criterion.description
                )
            })
            .collect()
    }

    pub fn seeds_csv(&self) -> String {
        let keys: std::collections::BTreeSet<&String> = self.per_seed.iter().flat_map(|s| s.metrics.keys()).collect();
        let mut out = String::from("seed");
        for k in &keys {
            write!(out, ",{k}").expect("string write");
        }
        out.push('\n');
        for s in &self.per_seed {
            write!(out, "{}", s.seed).expect("string write");
            for k in &keys {
                match s.metrics.get(*k) {
                    Some(v) => write!(out, ",{v:?}"),
                    None => write!(out, ","),
                }
                .expect("string write");
            }
            out.push('\n');
        }
        out
    }

    pub fn write(&self, out_dir: &Path) -> Result<(), RecipeError> {
        std::fs::create_dir_all(out_dir)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(out_dir.join(RESULT_FILE), json)?;
        std::fs::write(out_dir.join(SEEDS_FILE), self.seeds_csv())?;
        Ok(())
    }
}

pub fn seed_dir(out_dir: &Path, seed: u64) -> PathBuf {
    out_dir.join(format!("seed_{seed}"))
}

type SeedFn = fn(u64, &Path, &RecipeOptions) -> anyhow::Result<BTreeMap<String, f64>>;

fn recipe(id: &str) -> Option<(SeedFn, Vec<Criterion>)> {
    Some(match id.to_ascii_uppercase().as_str() {
        "R1" => (r1::run_seed as SeedFn, r1::criteria()),
        "R2" => (r2::run_seed, r2::criteria()),
        "R3" => (r3::run_seed, r3::criteria()),
        "R4" => (r4::run_seed, r4::criteria()),
        "R5" => (r5::run_seed, r5::criteria()),
        "R6" => (r6::run_seed, r6::criteria()),
        "R7" => (r7::run_seed, r7::criteria()),
        _ => return None,
    })
}

/// Runs recipe `id` for every seed in parallel and writes `result.json` and
/// `seeds.csv` into `opts.out_dir`.
///
/// If any seed fails, the seeds that finished are still written, with the
/// failures listed, and the first failure is returned as an error.
pub fn run_recipe(id: &str, opts: &RecipeOptions) -> Result<RecipeResult, RecipeError> {
    let (run_seed, criteria) = recipe(id).ok_or_else(|| RecipeError::Unknown(id.to_string()))?;
    if opts.seeds.is_empty() {
        return Err(RecipeError::NoSeeds);
    }
    let recipe_id = id.to_ascii_uppercase();
    std::fs::create_dir_all(&opts.out_dir)?;
    let outcomes: Vec<(u64, anyhow::Result<BTreeMap<String, f64>>)> = opts
        .seeds
        .par_iter()
        .map(|&seed| (seed, run_seed(seed, &seed_dir(&opts.out_dir, seed), opts)))
        .collect();

    let mut per_seed = Vec::new();
    let mut failures = BTreeMap::new();
    for (seed, outcome) in outcomes {
        match outcome {
            Ok(metrics) => per_seed.push(SeedMetrics { seed, metrics }),
            Err(e) => {
                failures.insert(seed, format!("{e:#}"));
            }
        }
    }
    let mut result = RecipeResult::evaluate(&recipe_id, &opts.seeds, per_seed, &criteria);
    result.failures = failures;
    result.write(&opts.out_dir)?;
    if let Some((&seed, message)) = result.failures.iter().next() {
        return Err(RecipeError::SeedFailed { seed, message: message.clone(), out_dir: opts.out_dir.clone() });
    }
    Ok(result)
}
