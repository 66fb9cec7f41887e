//! Checks the second-order account of merging on exactly quadratic losses,
//! then applies it to a small trained network for reference.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::Context;
use nalgebra::DMatrix;
use pma_core::analysis::{
    empirical_hessian, quadratic_loss, surface_grid, taylor_report, GridRange, QuadraticOracle, TIE_BAND,
};
use pma_core::merge::{MergeMode, MergeStrategy};
use pma_core::testbed::{train, ModelSpec, Workbench};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::common::{base_config, median, plan_and_merge, plan_paths, stable, Metrics, CHECKPOINT_EVERY};
use super::{Criterion, RecipeOptions};

pub const DEFAULT_INSTANCES_PER_SEED: usize = 100;
pub const DIM: usize = 10;
pub const MAX_K: usize = 8;
pub const CONSISTENCY_TOLERANCE: f64 = 1e-9;
/// Every this-many-th instance uses identical deviations, an exact tie.
pub const TIE_EVERY: usize = 10;
pub const INSTANCES_FILE: &str = "instances.csv";
pub const EMPIRICAL_FILE: &str = "taylor_empirical.json";

const EMPIRICAL_STEPS: u64 = 2000;
const EMPIRICAL_N: usize = 10;
const HESSIAN_STEP: f64 = 1e-4;
const GRID_RESOLUTION: usize = 21;

pub fn criteria() -> Vec<Criterion> {
    vec![
        Criterion::new("ok.verdict_agrees", "merge-benefit condition matches merged < average on every non-tie instance", 1.0),
        Criterion::new("ok.prediction_exact", "predicted merged loss equals the exact value within 1e-9 relative", 1.0),
    ]
}

pub struct Instance {
    pub oracle: QuadraticOracle,
    pub thetas: Vec<Vec<f64>>,
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

/// A random positive-definite quadratic and `k` points around its optimum.
///
/// Deviations share a common component of random strength, which makes the
/// cross terms range from negligible to dominant.
pub fn random_instance(rng: &mut ChaCha8Rng, tie: bool) -> Instance {
    let a = DMatrix::from_fn(DIM, DIM, |_, _| rng.sample::<f64, _>(StandardNormal));
    let h = (&a * a.transpose()) / DIM as f64 + DMatrix::identity(DIM, DIM) * 0.1;
    let h = 0.5 * (&h + h.transpose());
    let star = normal_vec(rng, DIM, 1.0);
    let loss_at_opt = rng.random_range(0.0..1.0);
    let oracle = QuadraticOracle::new(star.clone(), h, loss_at_opt).expect("AAᵀ + 0.1 I is positive definite");

    let k = rng.random_range(2..=MAX_K);
    let strength = rng.random_range(0.0..2.0);
    let common = normal_vec(rng, DIM, strength);
    let spread = rng.random_range(0.01..1.0);
    let shared: Vec<f64> = normal_vec(rng, DIM, spread);
    let thetas = (0..k)
        .map(|_| {
            let noise = if tie { shared.clone() } else { normal_vec(rng, DIM, spread) };
            star.iter().zip(&common).zip(&noise).map(|((s, c), e)| s + c + e).collect()
        })
        .collect();
    Instance { oracle, thetas }
}

/// Outcome of one instance, with the direct comparison computed only from
/// loss evaluations.
pub struct InstanceCheck {
    pub k: usize,
    pub diag_sum: f64,
    pub cross_sum: f64,
    pub avg_direct: f64,
    pub merged_exact: f64,
    pub merged_predicted: f64,
    pub condition: bool,
    pub tie: bool,
}

impl InstanceCheck {
    pub fn agrees(&self) -> bool {
        self.tie || self.condition == (self.merged_exact < self.avg_direct)
    }

    pub fn consistency_error(&self) -> f64 {
        (self.merged_predicted - self.merged_exact).abs() / self.merged_exact.abs()
    }
}

pub fn check_instance(inst: &Instance) -> anyhow::Result<InstanceCheck> {
    let k = inst.thetas.len();
    let report = taylor_report(&inst.oracle, &inst.thetas, None)?;
    let losses = inst
        .thetas
        .iter()
        .map(|t| quadratic_loss(&inst.oracle, t))
        .collect::<Result<Vec<_>, _>>()?;
    let avg_direct = losses.iter().sum::<f64>() / k as f64;
    let mean: Vec<f64> = (0..DIM).map(|j| inst.thetas.iter().map(|t| t[j]).sum::<f64>() / k as f64).collect();
    let merged_exact = quadratic_loss(&inst.oracle, &mean)?;
    let tie = (avg_direct - merged_exact).abs() <= TIE_BAND * avg_direct.abs().max(merged_exact.abs());
    Ok(InstanceCheck {
        k,
        diag_sum: report.diag_sum,
        cross_sum: report.cross_sum,
        avg_direct,
        merged_exact,
        merged_predicted: report.merged_loss_predicted,
        condition: report.condition_holds,
        tie,
    })
}

pub fn run_seed(seed: u64, dir: &Path, opts: &RecipeOptions) -> anyhow::Result<BTreeMap<String, f64>> {
    std::fs::create_dir_all(dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut csv = String::from("instance,k,diag_sum,cross_sum,avg_loss,merged_exact,merged_predicted,condition,tie\n");
    let (mut ties, mut disagreements) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for i in 0..opts.instances_per_seed {
        let c = check_instance(&random_instance(&mut rng, i % TIE_EVERY == 0))?;
        writeln!(
            csv,
            "{i},{},{:?},{:?},{:?},{:?},{:?},{},{}",
            c.k, c.diag_sum, c.cross_sum, c.avg_direct, c.merged_exact, c.merged_predicted, c.condition, c.tie
        )
        .expect("string write");
        ties += c.tie as usize;
        disagreements += (!c.agrees()) as usize;
        worst = worst.max(c.consistency_error());
    }
    std::fs::write(dir.join(INSTANCES_FILE), csv)?;

    let mut m = Metrics::default();
    m.set("instances", opts.instances_per_seed as f64);
    m.set("ties", ties as f64);
    m.set("disagreements", disagreements as f64);
    m.set("max_consistency_error", worst);
    m.flag("ok.verdict_agrees", disagreements == 0);
    m.flag("ok.prediction_exact", worst <= CONSISTENCY_TOLERANCE);
    empirical(seed, dir, &mut m).context("empirical analysis")?;
    Ok(m.finish())
}

/// Taylor report and loss surface around a small network's merged
/// checkpoints. θ* is the best validation point among the members and
/// their merge; the network is small enough for a dense Hessian.
fn empirical(seed: u64, dir: &Path, m: &mut Metrics) -> anyhow::Result<()> {
    let mut cfg = base_config(seed, EMPIRICAL_STEPS, stable(EMPIRICAL_STEPS));
    cfg.model = ModelSpec { layer_widths: vec![4, 8, 1], ..cfg.model };
    let bench = Workbench::new(&cfg)?;
    let run = train(&cfg, &dir.join("empirical"))?;
    let merged_path = dir.join("empirical_merged.pmat");
    let p = plan_and_merge(&run, &MergeStrategy::Sma, EMPIRICAL_N, CHECKPOINT_EVERY, None, &merged_path, MergeMode::InMemory)?;
    let members = plan_paths(&p).iter().map(|c| bench.load(c)).collect::<Result<Vec<_>, _>>()?;
    let merged = bench.load(&merged_path)?;
    let member_vals: Vec<f64> = members.iter().map(|t| bench.val_loss(t)).collect();
    let merged_val = bench.val_loss(&merged);

    let (star, star_val) = members
        .iter()
        .zip(&member_vals)
        .chain(std::iter::once((&merged, &merged_val)))
        .min_by(|a, b| a.1.total_cmp(b.1))
        .map(|(t, v)| (t.clone(), *v))
        .expect("members non-empty");
    let hessian = empirical_hessian(|t| bench.val_loss(t), &star, HESSIAN_STEP)?;
    let mut json = serde_json::json!({
        "theta_star": "best validation loss among members and their SMA merge",
        "theta_star_val": star_val,
        "merged_val": merged_val,
        "member_vals": member_vals,
    });
    match QuadraticOracle::new(star.clone(), hessian, star_val) {
        Ok(oracle) => {
            let report = taylor_report(&oracle, &members, None)?;
            m.set("empirical_cross_ratio", report.cross_ratio());
            m.flag("empirical_condition_holds", report.condition_holds);
            m.set("empirical_predicted_merged", report.merged_loss_predicted);
            json["report"] = serde_json::to_value(&report)?;
        }
        Err(e) => json["hessian_not_usable"] = e.to_string().into(),
    }
    m.flag("empirical_hessian_pd", json.get("report").is_some());
    m.set("empirical_merged_val", merged_val);
    std::fs::write(dir.join(EMPIRICAL_FILE), serde_json::to_string_pretty(&json)? + "\n")?;

    // Slice through the merge along the two most variable coordinates.
    let dim = merged.len();
    let var = |j: usize| {
        let mu = members.iter().map(|t| t[j]).sum::<f64>() / members.len() as f64;
        members.iter().map(|t| (t[j] - mu).powi(2)).sum::<f64>()
    };
    let mut axes: Vec<usize> = (0..dim).collect();
    axes.sort_by(|&a, &b| var(b).total_cmp(&var(a)).then(a.cmp(&b)));
    let (ai, aj) = (axes[0], axes[1]);
    let radius = |j: usize| {
        1.5 * members.iter().map(|t| (t[j] - merged[j]).abs()).fold(0.0, f64::max).max(1e-6)
    };
    let mut points: Vec<(String, Vec<f64>)> =
        p.resolved.iter().zip(&members).map(|(e, t)| (format!("step_{}", e.step), t.clone())).collect();
    points.push(("sma".into(), merged.clone()));
    let grid = surface_grid(
        |t| bench.val_loss(t),
        &merged,
        ai,
        aj,
        GridRange::centered(merged[ai], radius(ai), GRID_RESOLUTION),
        GridRange::centered(merged[aj], radius(aj), GRID_RESOLUTION),
        &points,
    )?;
    grid.write_csv(dir)?;
    let member_median = median(&member_vals);
    m.set("surface_member_median_val", member_median);
    m.flag("surface_sma_le_median", merged_val <= member_median);
    Ok(())
}
