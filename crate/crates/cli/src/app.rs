use std::ffi::OsString;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use pma_core::merge::{compute_weights, merge, report_path, MergeMode, MergeStrategy};
use pma_core::planner::{plan, recommend_interval, MergePlan, DEFAULT_MERGE_COUNT};
use pma_core::store::TrajectoryManifest;
use pma_core::testbed::{train, TrainConfig};

use crate::recipes::{run_recipe, RecipeError, RecipeOptions, DEFAULT_INSTANCES_PER_SEED};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RECIPE_FAIL: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
/// Caps the worker threads used for merging and parallel seeds.
pub const THREADS_ENV: &str = "PMA_THREADS";

#[derive(Debug, Parser)]
#[command(name = "pma", version, about = "Pre-trained checkpoint averaging: plan, merge, train, and run experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a testbed model from a JSON config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Select checkpoints from a trajectory manifest and write plan.json.
    Plan {
        #[arg(long)]
        manifest: PathBuf,
        #[command(flatten)]
        plan: PlanArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// Output plan file.
        #[arg(long)]
        out: PathBuf,
    },
    /// Merge checkpoints given by a plan, a manifest or an explicit list.
    Merge {
        #[arg(long, conflicts_with_all = ["manifest", "inputs"])]
        plan: Option<PathBuf>,
        #[arg(long, conflicts_with = "inputs")]
        manifest: Option<PathBuf>,
        /// Checkpoint files, oldest first.
        #[arg(long, num_args = 1..)]
        inputs: Vec<PathBuf>,
        #[command(flatten)]
        plan_args: PlanArgs,
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long, value_enum, default_value_t = ModeArg::Memory)]
        mode: ModeArg,
        /// Output checkpoint; the report is written next to it.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a scripted multi-seed experiment (R1..R7).
    Recipe {
        id: String,
        /// Seeds as a list and/or inclusive ranges, e.g. `0-9` or `1,4,7-8`.
        #[arg(long, default_value = "0-9", value_parser = parse_seeds)]
        seeds: SeedList,
        /// Quadratic instances per seed (R7).
        #[arg(long, default_value_t = DEFAULT_INSTANCES_PER_SEED)]
        instances: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Suggested merge interval in tokens for a model size.
    RecommendInterval {
        /// Total parameter count, e.g. 13e9.
        #[arg(long, value_parser = parse_count)]
        params: u64,
    },
}

#[derive(Debug, Clone, Args)]
pub struct PlanArgs {
    /// Number of checkpoints to merge.
    #[arg(long, default_value_t = DEFAULT_MERGE_COUNT)]
    pub n: usize,
    /// Token spacing between merged checkpoints.
    #[arg(long, value_parser = parse_count)]
    pub interval_tokens: Option<u64>,
    /// Newest token count to merge at (default: the last checkpoint).
    #[arg(long, value_parser = parse_count)]
    pub anchor_tokens: Option<u64>,
}

#[derive(Debug, Clone, Args)]
pub struct StrategyArgs {
    #[arg(long, value_enum, default_value_t = StrategyArg::Sma)]
    pub strategy: StrategyArg,
    /// EMA smoothing factor.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Comma-separated weights for the custom strategy, oldest first.
    #[arg(long, value_delimiter = ',')]
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum StrategyArg {
    Sma,
    Ema,
    Wma,
    Custom,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Memory,
    Streaming,
}

impl From<ModeArg> for MergeMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Memory => MergeMode::InMemory,
            ModeArg::Streaming => MergeMode::Streaming,
        }
    }
}

impl StrategyArgs {
    pub fn strategy(&self) -> anyhow::Result<MergeStrategy> {
        if self.alpha.is_some() && self.strategy != StrategyArg::Ema {
            bail!("--alpha only applies to --strategy ema");
        }
        if !self.weights.is_empty() && self.strategy != StrategyArg::Custom {
            bail!("--weights only applies to --strategy custom");
        }
        let s = match self.strategy {
            StrategyArg::Sma => MergeStrategy::Sma,
            StrategyArg::Wma => MergeStrategy::Wma,
            StrategyArg::Ema => MergeStrategy::Ema { alpha: self.alpha.context("--strategy ema needs --alpha")? },
            StrategyArg::Custom => {
                if self.weights.is_empty() {
                    bail!("--strategy custom needs --weights");
                }
                MergeStrategy::Custom { weights: self.weights.clone() }
            }
        };
        s.validate()?;
        Ok(s)
    }
}

/// Accepts plain integers and float notation such as `8e9`.
pub fn parse_count(s: &str) -> Result<u64, String> {
    if let Ok(v) = s.parse::<u64>() {
        return Ok(v);
    }
    let f: f64 = s.parse().map_err(|_| format!("not a count: {s:?}"))?;
    if f.is_finite() && f >= 0.0 && f.fract() == 0.0 && f <= u64::MAX as f64 {
        Ok(f as u64)
    } else {
        Err(format!("not a non-negative whole number: {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

pub fn parse_seeds(s: &str) -> Result<SeedList, String> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        match part.split_once('-') {
            Some((a, b)) => {
                let a: u64 = a.trim().parse().map_err(|_| format!("bad seed range {part:?}"))?;
                let b: u64 = b.trim().parse().map_err(|_| format!("bad seed range {part:?}"))?;
                if a > b {
                    return Err(format!("empty seed range {part:?}"));
                }
                seeds.extend(a..=b);
            }
            None => seeds.push(part.parse().map_err(|_| format!("bad seed {part:?}"))?),
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(SeedList(seeds))
}

fn configure_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var(THREADS_ENV) {
        let n: usize = v.parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a thread count"))?;
        if n == 0 {
            bail!("{THREADS_ENV} must be at least 1");
        }
        // A second call fails harmlessly when the pool already exists.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn load_manifest(path: &Path) -> anyhow::Result<TrajectoryManifest> {
    let manifest = TrajectoryManifest::load(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    Ok(manifest.rooted_at(base))
}

fn plan_from_manifest(path: &Path, args: &PlanArgs, strategy: &MergeStrategy) -> anyhow::Result<MergePlan> {
    let interval = args.interval_tokens.context("--interval-tokens is required when planning from a manifest")?;
    Ok(plan(&load_manifest(path)?, strategy, args.n, interval, args.anchor_tokens)?)
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> anyhow::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

enum Outcome {
    Done,
    RecipeFailed,
}

fn execute(cli: Cli) -> anyhow::Result<Outcome> {
    configure_threads()?;
    match cli.command {
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let run = train(&cfg, &out)?;
            let s = &run.summary;
            println!(
                "trained steps {}..{}; {} checkpoints; final val loss {}",
                s.start_step,
                s.end_step,
                run.manifest.len(),
                s.final_val_loss.map_or("n/a".to_string(), |v| v.to_string())
            );
            if let Some(step) = s.diverged_at {
                println!("spike run stopped at step {step} on a non-finite loss");
            }
        }
        Command::Plan { manifest, plan: args, strategy, out } => {
            let p = plan_from_manifest(&manifest, &args, &strategy.strategy()?)?;
            write_json(&p, &out)?;
            println!("planned {} checkpoints ending at {} tokens -> {}", p.n, p.anchor_tokens, out.display());
        }
        Command::Merge { plan: plan_file, manifest, inputs, plan_args, strategy, mode, out } => {
            let (paths, weights, strategy) = if let Some(pf) = plan_file {
                let text = std::fs::read_to_string(&pf).with_context(|| format!("reading {}", pf.display()))?;
                let p: MergePlan = serde_json::from_str(&text).with_context(|| format!("parsing {}", pf.display()))?;
                (p.checkpoint_paths(), p.weights, p.strategy)
            } else if let Some(m) = manifest {
                let s = strategy.strategy()?;
                let p = plan_from_manifest(&m, &plan_args, &s)?;
                (p.checkpoint_paths(), p.weights, s)
            } else if !inputs.is_empty() {
                let s = strategy.strategy()?;
                let w = compute_weights(&s, inputs.len())?;
                (inputs.iter().map(|p| p.display().to_string()).collect(), w, s)
            } else {
                bail!("give one of --plan, --manifest or --inputs");
            };
            let report = merge(&paths, &weights, &strategy, &out, mode.into())?;
            println!(
                "merged {} checkpoints ({strategy}) -> {} sha256 {}; report {}",
                paths.len(),
                out.display(),
                report.sha256,
                report_path(&out).display()
            );
        }
        Command::Recipe { id, seeds, instances, out } => {
            let mut opts = RecipeOptions::new(seeds.0, &out);
            opts.instances_per_seed = instances;
            let result = run_recipe(&id, &opts)?;
            println!("{} over {} seeds: {}", result.recipe_id, result.seeds.len(), if result.pass { "PASS" } else { "FAIL" });
            for line in result.summary_lines() {
                println!("  {line}");
            }
            if !result.pass {
                return Ok(Outcome::RecipeFailed);
            }
        }
        Command::RecommendInterval { params } => {
            println!("{}", recommend_interval(params));
        }
    }
    Ok(Outcome::Done)
}

/// Parses `args` (including the program name) and runs the command,
/// returning the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(Outcome::Done) => EXIT_OK,
        Ok(Outcome::RecipeFailed) => EXIT_RECIPE_FAIL,
        Err(e) => {
            eprintln!("error: {e:#}");
            match e.downcast_ref::<RecipeError>() {
                Some(RecipeError::Unknown(_) | RecipeError::NoSeeds) => EXIT_USAGE,
                _ => EXIT_RUNTIME,
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn command_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn seeds_ranges_and_lists() {
        assert_eq!(parse_seeds("0-3").unwrap().0, vec![0, 1, 2, 3]);
        assert_eq!(parse_seeds("1,4,7-8").unwrap().0, vec![1, 4, 7, 8]);
        assert!(parse_seeds("5-2").is_err());
        assert!(parse_seeds("x").is_err());
    }

    #[test]
    fn counts_accept_float_notation() {
        assert_eq!(parse_count("8e9").unwrap(), 8_000_000_000);
        assert_eq!(parse_count("123").unwrap(), 123);
        assert!(parse_count("1.5").is_err());
        assert!(parse_count("-1").is_err());
    }

    #[test]
    fn strategy_flags() {
        let s = |strategy, alpha, weights: Vec<f64>| StrategyArgs { strategy, alpha, weights }.strategy();
        assert_eq!(s(StrategyArg::Ema, Some(0.2), vec![]).unwrap(), MergeStrategy::Ema { alpha: 0.2 });
        assert!(s(StrategyArg::Ema, None, vec![]).is_err());
        assert!(s(StrategyArg::Sma, Some(0.2), vec![]).is_err());
        assert!(s(StrategyArg::Custom, None, vec![]).is_err());
        assert!(s(StrategyArg::Ema, Some(1.5), vec![]).is_err());
    }
}
