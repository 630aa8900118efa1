//! End-to-end experiments on gridworlds: build the environment, synthesise
//! the experts, generate and label data, train every configured method for
//! every seed, evaluate, and aggregate across seeds.
//!
//! Seeds fan out over a rayon pool whose size is capped by the
//! `UNIQ_MDP_THREADS` environment variable. Every worker derives its RNG
//! streams from its own seed, so results do not depend on scheduling.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::baselines::{train_bc, train_dwbc, train_iq, BaselineKind, BcMode, DwbcConfig, IqRole};
use crate::dataset::{build_mix, label_undesired, rollout, Trajectory, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::eval::{compare, evaluate, mean_std, Comparison, EvalReport};
use crate::gridworld::{build_gridworld, river_crossing, synthesize_experts, ExpertPair, GridworldSpec};
use crate::mdp::{FiniteMdp, TabularPolicy};
use crate::psi::Regularizer;
use crate::uniq::{train_uniq, UniqConfig, ValueMode};

/// Environment variable capping the worker pool.
pub const THREADS_ENV: &str = "UNIQ_MDP_THREADS";

/// Header of aggregate tables; statistics are across seeds.
pub const AGGREGATE_HEADER: &str = "method,mean_return,std_return,mean_cost,std_cost,cvar10_cost,n_seeds";

/// Undesired-dataset sizes of the standard ablation.
pub const ABLATION_SIZES: [usize; 6] = [25, 50, 100, 200, 300, 500];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Uniq,
    BcMix,
    BcUn,
    IqMix,
    IqUn,
    Dwbc,
    /// BC on the constrained expert's own trajectories.
    BcSafe,
}

impl Method {
    pub const ALL: [Self; 7] = [
        Self::Uniq,
        Self::BcMix,
        Self::BcUn,
        Self::IqMix,
        Self::IqUn,
        Self::Dwbc,
        Self::BcSafe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Uniq => "uniq",
            Self::BcSafe => "bc-safe",
            Self::BcMix => BaselineKind::BcMix.name(),
            Self::BcUn => BaselineKind::BcUn.name(),
            Self::IqMix => BaselineKind::IqMix.name(),
            Self::IqUn => BaselineKind::IqUn.name(),
            Self::Dwbc => BaselineKind::Dwbc.name(),
        }
    }
}

impl From<BaselineKind> for Method {
    fn from(kind: BaselineKind) -> Self {
        match kind {
            BaselineKind::BcMix => Self::BcMix,
            BaselineKind::BcUn => Self::BcUn,
            BaselineKind::IqMix => Self::IqMix,
            BaselineKind::IqUn => Self::IqUn,
            BaselineKind::Dwbc => Self::Dwbc,
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExpertsConfig {
    pub lambda_cost: f64,
    pub temperature: f64,
}

impl Default for ExpertsConfig {
    fn default() -> Self {
        Self {
            lambda_cost: 5.0,
            temperature: 0.02,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub horizon: usize,
    /// Rollouts drawn from each expert per seed.
    pub pool_size: usize,
    pub cost_threshold: f64,
    pub n_safe: usize,
    pub n_undesired: usize,
    /// `|D^UN|`.
    pub n_un: usize,
    /// Undesired trajectories held out of the mix pool; `D^UN` is a prefix
    /// of them, so datasets of different sizes are nested.
    pub un_reserve: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            horizon: 60,
            pool_size: 3_000,
            cost_threshold: 0.5,
            n_safe: 400,
            n_undesired: 1_600,
            n_un: 200,
            un_reserve: 500,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub horizon: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 1_000,
            horizon: 60,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BaselinesConfig {
    pub iq_mix: UniqConfig,
    pub iq_un: UniqConfig,
    pub dwbc: DwbcConfig,
    pub bc_un_lr: f64,
    pub bc_un_steps: usize,
}

impl Default for BaselinesConfig {
    fn default() -> Self {
        Self {
            iq_mix: UniqConfig {
                psi: Regularizer::quadratic(0.05),
                ..default_uniq()
            },
            iq_un: default_uniq(),
            dwbc: DwbcConfig::default(),
            bc_un_lr: 0.1,
            bc_un_steps: 500,
        }
    }
}

/// Trainer settings used by experiments unless the config overrides them.
pub fn default_uniq() -> UniqConfig {
    UniqConfig {
        psi: Regularizer::quadratic(1.5),
        value_mode: ValueMode::Sampled,
        ..UniqConfig::default()
    }
}

fn default_methods() -> Vec<Method> {
    vec![Method::Uniq, Method::BcMix, Method::IqMix, Method::Dwbc]
}

fn default_seeds() -> Vec<u64> {
    (0..5).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub gridworld: GridworldSpec,
    #[serde(default)]
    pub experts: ExpertsConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default = "default_methods")]
    pub methods: Vec<Method>,
    #[serde(default = "default_uniq")]
    pub uniq: UniqConfig,
    #[serde(default)]
    pub baselines: BaselinesConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
}

impl ExperimentConfig {
    /// River-crossing gridworld with 400 safe and 1600 undesired
    /// trajectories in the mix (ratio 1:4).
    pub fn level2() -> Self {
        Self {
            gridworld: river_crossing(0.95, 0.1),
            experts: ExpertsConfig::default(),
            data: DataConfig::default(),
            methods: default_methods(),
            uniq: default_uniq(),
            baselines: BaselinesConfig::default(),
            eval: EvalConfig::default(),
            seeds: default_seeds(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.horizon == 0 || self.eval.horizon == 0 {
            return Err(Error::Config("horizons must be positive".into()));
        }
        if d.n_un == 0 {
            return Err(Error::Config("data.n_un must be positive".into()));
        }
        if d.n_un > d.un_reserve {
            return Err(Error::Config(format!(
                "data.n_un = {} exceeds data.un_reserve = {}",
                d.n_un, d.un_reserve
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Config("no methods configured".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("no seeds configured".into()));
        }
        self.uniq.validate()?;
        self.baselines.iq_mix.validate()?;
        self.baselines.iq_un.validate()
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn digest(&self) -> Result<String> {
        Ok(hex::encode(Sha256::digest(self.to_toml()?.as_bytes())))
    }
}

/// The environment shared by every seed.
#[derive(Debug, Clone)]
pub struct Environment {
    pub mdp: FiniteMdp,
    pub experts: ExpertPair,
}

pub fn prepare_environment(cfg: &ExperimentConfig) -> Result<Environment> {
    let mdp = build_gridworld(&cfg.gridworld)?;
    let experts = synthesize_experts(&mdp, cfg.experts.lambda_cost, cfg.experts.temperature)?;
    Ok(Environment { mdp, experts })
}

/// Labeled trajectory pools of one seed.
#[derive(Debug, Clone)]
pub struct SeedPools {
    /// Constrained-expert rollouts within the cost threshold.
    pub safe: Vec<Trajectory>,
    /// Unconstrained-expert rollouts above the cost threshold.
    pub undesired: Vec<Trajectory>,
}

/// Per-seed pool seeds are spread so the two experts never share a stream.
fn pool_seeds(seed: u64) -> (u64, u64) {
    (
        seed.wrapping_mul(2).wrapping_add(1_000),
        seed.wrapping_mul(2).wrapping_add(1_001),
    )
}

fn eval_seed(seed: u64) -> u64 {
    seed.wrapping_add(7_000_000)
}

pub fn generate_pools(cfg: &ExperimentConfig, env: &Environment, seed: u64) -> SeedPools {
    let (s_cons, s_unc) = pool_seeds(seed);
    let d = &cfg.data;
    let cons = rollout(&env.mdp, &env.experts.constrained, d.horizon, d.pool_size, s_cons);
    let unc = rollout(&env.mdp, &env.experts.unconstrained, d.horizon, d.pool_size, s_unc);
    let (_, safe) = label_undesired(cons, d.cost_threshold);
    let (undesired, _) = label_undesired(unc, d.cost_threshold);
    SeedPools { safe, undesired }
}

/// Datasets of one seed.
#[derive(Debug, Clone)]
pub struct SeedData {
    pub un: TrajectoryDataset,
    pub mix: TrajectoryDataset,
    /// The first `n_safe` safe trajectories, used by BC-safe.
    pub safe: TrajectoryDataset,
}

/// Builds `D^UN` (a prefix of the reserved undesired trajectories), the mix
/// and the safe set.
pub fn build_datasets(
    cfg: &ExperimentConfig,
    env: &Environment,
    pools: &SeedPools,
    seed: u64,
    n_un: usize,
) -> Result<SeedData> {
    let d = &cfg.data;
    if n_un == 0 {
        return Err(Error::Config("undesired dataset size must be positive".into()));
    }
    if n_un > d.un_reserve || d.un_reserve > pools.undesired.len() {
        return Err(Error::InsufficientPool {
            requested: n_un.max(d.un_reserve),
            available: pools.undesired.len().min(d.un_reserve),
        });
    }
    let (reserve, mix_pool) = pools.undesired.split_at(d.un_reserve);
    let un = TrajectoryDataset::undesired(reserve[..n_un].to_vec(), d.cost_threshold, &env.mdp)?;
    let mix = build_mix(&pools.safe, mix_pool, d.n_safe, d.n_undesired, seed, &env.mdp)?;
    let safe = build_mix(&pools.safe, &[], d.n_safe.max(1), 0, seed, &env.mdp)?;
    Ok(SeedData { un, mix, safe })
}

/// Trains one method and returns its policy.
pub fn train_method(cfg: &ExperimentConfig, method: Method, data: &SeedData, seed: u64) -> Result<TabularPolicy> {
    let b = &cfg.baselines;
    match method {
        Method::Uniq => Ok(train_uniq(&data.un, &data.mix, &cfg.uniq, seed)?.policy),
        Method::BcMix => train_bc(&data.mix, BcMode::Maximize, 0.0, 0),
        Method::BcSafe => train_bc(&data.safe, BcMode::Maximize, 0.0, 0),
        Method::BcUn => train_bc(&data.un, BcMode::Minimize, b.bc_un_lr, b.bc_un_steps),
        Method::IqMix => Ok(train_iq(&data.mix, IqRole::Imitate, &b.iq_mix, seed)?.policy),
        Method::IqUn => Ok(train_iq(&data.un, IqRole::Avoid, &b.iq_un, seed)?.policy),
        Method::Dwbc => Ok(train_dwbc(&data.un, &data.mix, &b.dwbc)?.policy),
    }
}

/// Outcome of one method on one seed.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub method: Method,
    pub seed: u64,
    pub outcome: std::result::Result<(TabularPolicy, EvalReport), String>,
}

/// Per-seed results of every method. Failures are kept, not propagated.
#[derive(Debug, Clone, Default)]
pub struct ExperimentResults {
    pub records: Vec<RunRecord>,
}

impl ExperimentResults {
    /// Successful reports of `method`, ordered by seed.
    pub fn reports(&self, method: Method) -> Vec<(u64, &EvalReport)> {
        let mut out: Vec<_> = self
            .records
            .iter()
            .filter(|r| r.method == method)
            .filter_map(|r| r.outcome.as_ref().ok().map(|(_, rep)| (r.seed, rep)))
            .collect();
        out.sort_by_key(|(s, _)| *s);
        out
    }

    pub fn failures(&self) -> Vec<(Method, u64, &str)> {
        self.records
            .iter()
            .filter_map(|r| r.outcome.as_ref().err().map(|e| (r.method, r.seed, e.as_str())))
            .collect()
    }

    /// Seed-level aggregate of one method: mean and sample std across the
    /// per-seed means, and the mean of the per-seed CVaR.
    pub fn aggregate(&self, method: Method) -> Option<EvalReport> {
        let reports = self.reports(method);
        if reports.is_empty() {
            return None;
        }
        let returns: Vec<f64> = reports.iter().map(|(_, r)| r.mean_return).collect();
        let costs: Vec<f64> = reports.iter().map(|(_, r)| r.mean_cost).collect();
        let cvar = reports.iter().map(|(_, r)| r.cvar10_cost).sum::<f64>() / reports.len() as f64;
        let (mean_return, std_return) = mean_std(&returns);
        let (mean_cost, std_cost) = mean_std(&costs);
        Some(EvalReport {
            mean_return,
            std_return,
            mean_cost,
            std_cost,
            cvar10_cost: cvar,
            n_episodes: reports.len(),
            exact_return: None,
            exact_cost: None,
        })
    }

    /// Aggregates of every method with at least one successful seed.
    pub fn comparison(&self) -> Result<Comparison> {
        let mut methods: Vec<Method> = self.records.iter().map(|r| r.method).collect();
        methods.sort();
        methods.dedup();
        let rows: BTreeMap<String, EvalReport> = methods
            .into_iter()
            .filter_map(|m| self.aggregate(m).map(|a| (m.name().to_string(), a)))
            .collect();
        compare(rows)
    }
}

/// Aggregate CSV with the across-seed header.
pub fn aggregate_csv(cmp: &Comparison) -> String {
    let body = cmp.to_csv();
    let mut out = format!("{AGGREGATE_HEADER}\n");
    for line in body.lines().skip(1) {
        out.push_str(line);
        out.push('\n');
    }
    out
}

/// Worker pool sized by [`THREADS_ENV`] (all cores when unset).
pub fn worker_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("cannot build worker pool: {e}")))
}

/// Trains and evaluates `methods` on every configured seed with `D^UN` of
/// size `n_un`. Data-generation failures fail the whole seed; training
/// failures are isolated per method.
pub fn run_methods(
    cfg: &ExperimentConfig,
    env: &Environment,
    methods: &[Method],
    n_un: usize,
) -> Result<ExperimentResults> {
    cfg.validate()?;
    let pool = worker_pool()?;
    let per_seed: Vec<Result<Vec<RunRecord>>> = pool.install(|| {
        cfg.seeds
            .par_iter()
            .map(|&seed| {
                let pools = generate_pools(cfg, env, seed);
                let data = build_datasets(cfg, env, &pools, seed, n_un)?;
                Ok(methods
                    .par_iter()
                    .map(|&method| RunRecord {
                        method,
                        seed,
                        outcome: train_and_evaluate(cfg, env, method, &data, seed).map_err(|e| e.to_string()),
                    })
                    .collect())
            })
            .collect()
    });
    let mut records = Vec::new();
    for r in per_seed {
        records.extend(r?);
    }
    for r in &records {
        if let Err(e) = &r.outcome {
            warn!("{} failed on seed {}: {e}", r.method.name(), r.seed);
        }
    }
    Ok(ExperimentResults { records })
}

fn train_and_evaluate(
    cfg: &ExperimentConfig,
    env: &Environment,
    method: Method,
    data: &SeedData,
    seed: u64,
) -> Result<(TabularPolicy, EvalReport)> {
    let policy = train_method(cfg, method, data, seed)?;
    let report = evaluate(&env.mdp, &policy, cfg.eval.episodes, cfg.eval.horizon, eval_seed(seed))?;
    Ok((policy, report))
}

/// Everything [`run_experiment`] wrote.
#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub dir: PathBuf,
    pub results: ExperimentResults,
    pub comparison: Comparison,
}

#[derive(Debug, Serialize)]
struct Manifest<'a> {
    config_sha256: String,
    crate_version: &'static str,
    methods: Vec<&'static str>,
    seeds: &'a [u64],
    failures: Vec<String>,
    files: BTreeMap<String, String>,
}

/// Runs the configured experiment and writes, under `out`:
///
/// - `config.toml`, `manifest.json` (config hash, version, per-file hashes);
/// - `seed-<k>/un.txt`, `seed-<k>/mix.txt`;
/// - `seed-<k>/<method>/policy.json` and `report.json`, or `error.txt`;
/// - `aggregate.csv` and `summary.txt`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> Result<ExperimentOutcome> {
    cfg.validate()?;
    let env = prepare_environment(cfg)?;
    let results = run_methods(cfg, &env, &cfg.methods, cfg.data.n_un)?;
    let mut files: BTreeMap<String, String> = BTreeMap::new();
    let mut write = |rel: String, contents: &str| -> Result<()> {
        let path = out.join(&rel);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, contents)?;
        files.insert(rel, hex::encode(Sha256::digest(contents.as_bytes())));
        Ok(())
    };
    write("config.toml".into(), &cfg.to_toml()?)?;
    for &seed in &cfg.seeds {
        let pools = generate_pools(cfg, &env, seed);
        let data = build_datasets(cfg, &env, &pools, seed, cfg.data.n_un)?;
        write(format!("seed-{seed}/un.txt"), &data.un.to_text()?)?;
        write(format!("seed-{seed}/mix.txt"), &data.mix.to_text()?)?;
    }
    for r in &results.records {
        let dir = format!("seed-{}/{}", r.seed, r.method.name());
        match &r.outcome {
            Ok((policy, report)) => {
                write(format!("{dir}/policy.json"), &policy.to_json()?)?;
                write(format!("{dir}/report.json"), &serde_json::to_string_pretty(report)?)?;
            }
            Err(e) => write(format!("{dir}/error.txt"), e)?,
        }
    }
    let comparison = results.comparison()?;
    write("aggregate.csv".into(), &aggregate_csv(&comparison))?;
    write("summary.txt".into(), &comparison.to_text())?;
    let manifest = Manifest {
        config_sha256: cfg.digest()?,
        crate_version: env!("CARGO_PKG_VERSION"),
        methods: cfg.methods.iter().map(|m| m.name()).collect(),
        seeds: &cfg.seeds,
        failures: results
            .failures()
            .into_iter()
            .map(|(m, s, e)| format!("{} seed {s}: {e}", m.name()))
            .collect(),
        files,
    };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    info!("experiment written to {}", out.display());
    Ok(ExperimentOutcome {
        dir: out.to_path_buf(),
        results,
        comparison,
    })
}

/// One row of an undesired-size sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub n_un: usize,
    pub method: Method,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SweepTable {
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("n_un,method,mean_return,std_return,mean_cost,std_cost,cvar10_cost,n_seeds\n");
        for row in &self.rows {
            let r = &row.report;
            writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                row.n_un,
                row.method.name(),
                r.mean_return,
                r.std_return,
                r.mean_cost,
                r.std_cost,
                r.cvar10_cost,
                r.n_episodes
            )
            .unwrap();
        }
        out
    }

    /// `(n_un, mean cost)` of one method in sweep order.
    pub fn costs(&self, method: Method) -> Vec<(usize, f64)> {
        self.rows
            .iter()
            .filter(|r| r.method == method)
            .map(|r| (r.n_un, r.report.mean_cost))
            .collect()
    }
}

/// Runs the configured methods once per `D^UN` size and aggregates across
/// seeds. Sizes must fit in `data.un_reserve`.
pub fn sweep_undesired_sizes(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<SweepTable> {
    cfg.validate()?;
    if let Some(&bad) = sizes.iter().find(|&&n| n == 0 || n > cfg.data.un_reserve) {
        return Err(Error::InsufficientPool {
            requested: bad,
            available: cfg.data.un_reserve,
        });
    }
    let env = prepare_environment(cfg)?;
    let mut table = SweepTable::default();
    for &n_un in sizes {
        let results = run_methods(cfg, &env, &cfg.methods, n_un)?;
        for &method in &cfg.methods {
            if let Some(report) = results.aggregate(method) {
                table.rows.push(SweepRow { n_un, method, report });
            }
        }
    }
    Ok(table)
}
