//! Configuration-driven experiments: policy comparisons, parameter sweeps and
//! scaling benchmarks, written out as CSV and JSON.
//!
//! A config is a TOML file. Unknown keys anywhere in it are rejected, and the
//! error lists every offending key. Each run `k` uses seed `seed + k` for the
//! instance, the arm stream and the simulator, so any single run can be
//! reproduced from the manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::env::{aggregate_runs, run, uniform_ball, Aggregate, ArmSource, Environment, RegretLedger, RunOptions};
use crate::error::{invalid, Error, Result};
use crate::graph::{build_rbf_graph, laplacians, smoothness, sparsity_measure, Graph, GraphGenConfig, GraphModel};
use crate::ingest::{read_bundle, BanditInstance};
use crate::policies::{
    write_trace, Club, ClubParams, GobLin, GobLinParams, GraphUcb, GraphUcbParams, LinUcb, LinUcbParams, Policy,
    UpdateRule,
};
use crate::signals::{random_theta0, NormKind, UserPopulation};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

/// Offset of the seeds used to tune Gob.Lin, kept clear of evaluation seeds.
pub const TUNING_SEED_OFFSET: u64 = 1_000_000;

const STREAM_FIXED_ARMS: u64 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    Graphucb,
    GraphucbLocal,
    Linucb,
    Goblin,
    Club,
}

impl PolicyKind {
    pub fn as_str(self) -> &'static str {
        match self {
            PolicyKind::Graphucb => "graphucb",
            PolicyKind::GraphucbLocal => "graphucb-local",
            PolicyKind::Linucb => "linucb",
            PolicyKind::Goblin => "goblin",
            PolicyKind::Club => "club",
        }
    }
}

/// Gob.Lin's λ: a number, or `"tune"` for a grid search on held-out seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ExploreSetting {
    Value(f64),
    Keyword(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicyConfig {
    pub kind: PolicyKind,
    /// Output directory name; defaults to the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_gram: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub joint_ridge: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_explore: Option<ExploreSetting>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alpha2: Option<f64>,
}

impl PolicyConfig {
    pub fn new(kind: PolicyKind) -> Self {
        Self {
            kind,
            label: None,
            alpha: None,
            delta: None,
            sigma: None,
            lambda_gram: None,
            joint_ridge: None,
            lambda_explore: None,
            alpha2: None,
        }
    }

    pub fn label(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.kind.as_str().to_string())
    }

    fn wants_tuning(&self) -> bool {
        self.kind == PolicyKind::Goblin && matches!(self.lambda_explore, Some(ExploreSetting::Keyword(_)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SignalConfig {
    pub gamma: f64,
    pub norm: NormKind,
    /// Smooth RBF signals on the thresholded graph instead of the full one.
    pub on_thresholded_graph: bool,
}

impl Default for SignalConfig {
    fn default() -> Self {
        Self {
            gamma: 10.0,
            norm: NormKind::Spectral,
            on_thresholded_graph: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    /// Directory written by `ingest`.
    pub path: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArmMode {
    /// Fresh arms every round.
    Resample,
    /// One arm set per run, drawn up front.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub n: usize,
    pub d: usize,
    pub m: usize,
    pub horizon: usize,
    pub runs: usize,
    pub seed: u64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub checkpoint_every: usize,
    pub probe_approximation: bool,
    pub trace: bool,
    /// Minimum fraction of checkpoints at which the noise bound must hold.
    pub noise_bound_threshold: f64,
    /// Held-out runs per grid point when tuning Gob.Lin.
    pub tune_runs: usize,
    pub alpha: f64,
    pub delta: f64,
    pub sigma: f64,
    pub lambda_gram: f64,
    pub arms: ArmMode,
    pub graph: GraphGenConfig,
    pub signal: SignalConfig,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub instance: Option<InstanceConfig>,
    pub policies: Vec<PolicyConfig>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            n: 20,
            d: 5,
            m: 100,
            horizon: 1000,
            runs: 20,
            seed: 0,
            output_dir: None,
            checkpoint_every: 10,
            probe_approximation: false,
            trace: false,
            noise_bound_threshold: 0.9,
            tune_runs: 3,
            alpha: 1.0,
            delta: 0.01,
            sigma: 0.01,
            lambda_gram: 0.01,
            arms: ArmMode::Resample,
            graph: GraphGenConfig::default(),
            signal: SignalConfig::default(),
            instance: None,
            policies: Vec::new(),
        }
    }
}

const TOP_KEYS: &[&str] = &[
    "n",
    "d",
    "m",
    "horizon",
    "runs",
    "seed",
    "output_dir",
    "checkpoint_every",
    "probe_approximation",
    "trace",
    "noise_bound_threshold",
    "tune_runs",
    "alpha",
    "delta",
    "sigma",
    "lambda_gram",
    "arms",
    "graph",
    "signal",
    "instance",
    "policies",
];
const GRAPH_KEYS: &[&str] = &["model", "rbf_rho", "sparsity_threshold", "er_p", "ba_m", "ws_m", "ws_p"];
const SIGNAL_KEYS: &[&str] = &["gamma", "norm", "on_thresholded_graph"];
const INSTANCE_KEYS: &[&str] = &["path"];
const POLICY_KEYS: &[&str] = &[
    "kind",
    "label",
    "alpha",
    "delta",
    "sigma",
    "lambda_gram",
    "joint_ridge",
    "lambda_explore",
    "alpha2",
];

/// Dotted paths of every key not in the schema.
pub fn unknown_keys(table: &toml::Table) -> Vec<String> {
    fn check(table: &toml::Table, allowed: &[&str], prefix: &str, out: &mut Vec<String>) {
        for k in table.keys() {
            if !allowed.contains(&k.as_str()) {
                out.push(format!("{prefix}{k}"));
            }
        }
    }
    let mut out = Vec::new();
    check(table, TOP_KEYS, "", &mut out);
    for (name, keys) in [("graph", GRAPH_KEYS), ("signal", SIGNAL_KEYS), ("instance", INSTANCE_KEYS)] {
        if let Some(toml::Value::Table(t)) = table.get(name) {
            check(t, keys, &format!("{name}."), &mut out);
        }
    }
    if let Some(toml::Value::Array(ps)) = table.get("policies") {
        for (k, p) in ps.iter().enumerate() {
            if let toml::Value::Table(t) = p {
                check(t, POLICY_KEYS, &format!("policies[{k}]."), &mut out);
            }
        }
    }
    out
}

impl ExperimentConfig {
    /// Parses and validates; every failure is a `Config` error.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        let bad = unknown_keys(&table);
        if !bad.is_empty() {
            return Err(Error::Config(format!("unknown keys: {}", bad.join(", "))));
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate().map_err(|e| match e {
            Error::Config(m) => Error::Config(m),
            other => Error::Config(other.to_string()),
        })?;
        Ok(cfg)
    }

    /// Reads a config file; a relative instance path is taken relative to it.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_str(&text)?;
        if let Some(inst) = &mut cfg.instance {
            if inst.path.is_relative() {
                if let Some(dir) = path.parent() {
                    inst.path = dir.join(&inst.path);
                }
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n", self.n),
            ("d", self.d),
            ("m", self.m),
            ("horizon", self.horizon),
            ("runs", self.runs),
            ("checkpoint_every", self.checkpoint_every),
            ("tune_runs", self.tune_runs),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return Err(Error::Config(format!("delta = {} must lie in (0,1]", self.delta)));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("sigma = {} must be nonnegative", self.sigma)));
        }
        if !(0.0..=1.0).contains(&self.noise_bound_threshold) {
            return Err(Error::Config(format!(
                "noise_bound_threshold = {} must lie in [0,1]",
                self.noise_bound_threshold
            )));
        }
        if !(self.signal.gamma >= 0.0 && self.signal.gamma.is_finite()) {
            return Err(Error::Config(format!("signal.gamma = {} must be nonnegative", self.signal.gamma)));
        }
        if self.instance.is_none() {
            self.graph.validate(self.n).map_err(|e| Error::Config(format!("graph: {e}")))?;
        }
        if self.policies.is_empty() {
            return Err(Error::Config("no policies configured".into()));
        }
        let mut labels = std::collections::BTreeSet::new();
        for (k, p) in self.policies.iter().enumerate() {
            if !labels.insert(p.label()) {
                return Err(Error::Config(format!("policies[{k}]: duplicate label {:?}", p.label())));
            }
            if let Some(ExploreSetting::Keyword(w)) = &p.lambda_explore {
                if w != "tune" {
                    return Err(Error::Config(format!(
                        "policies[{k}].lambda_explore must be a number or \"tune\", got {w:?}"
                    )));
                }
            }
            if p.lambda_explore.is_some() && p.kind != PolicyKind::Goblin {
                return Err(Error::Config(format!("policies[{k}].lambda_explore applies only to goblin")));
            }
            if p.alpha2.is_some() && p.kind != PolicyKind::Club {
                return Err(Error::Config(format!("policies[{k}].alpha2 applies only to club")));
            }
            build_policy(self, p, &Graph::empty(1), self.d, 0.5)
                .map_err(|e| Error::Config(format!("policies[{k}] ({}): {e}", p.label())))?;
        }
        Ok(())
    }
}

/// Instantiates one policy; `explore` is used for Gob.Lin unless the config fixes λ.
pub fn build_policy(cfg: &ExperimentConfig, p: &PolicyConfig, graph: &Graph, d: usize, explore: f64) -> Result<Box<dyn Policy>> {
    let alpha = p.alpha.unwrap_or(cfg.alpha);
    let delta = p.delta.unwrap_or(cfg.delta);
    let sigma = p.sigma.unwrap_or(cfg.sigma);
    let lambda_gram = p.lambda_gram.unwrap_or(cfg.lambda_gram);
    Ok(match p.kind {
        PolicyKind::Graphucb | PolicyKind::GraphucbLocal => {
            let params = GraphUcbParams {
                alpha,
                delta,
                sigma,
                lambda_gram,
                joint_ridge: p.joint_ridge,
            };
            let rule = if p.kind == PolicyKind::Graphucb { UpdateRule::Joint } else { UpdateRule::Local };
            Box::new(GraphUcb::new(graph, d, params, rule)?)
        }
        PolicyKind::Linucb => Box::new(LinUcb::new(graph.n(), d, LinUcbParams { alpha, delta, sigma })?),
        PolicyKind::Goblin => {
            let lambda_explore = match p.lambda_explore {
                Some(ExploreSetting::Value(v)) => v,
                _ => explore,
            };
            Box::new(GobLin::new(
                graph,
                d,
                GobLinParams {
                    alpha,
                    lambda_explore,
                    lambda_gram,
                },
            )?)
        }
        PolicyKind::Club => Box::new(Club::new(
            graph,
            d,
            ClubParams {
                alpha2: p.alpha2.unwrap_or(1.0),
                alpha,
                delta,
                sigma,
            },
        )?),
    })
}

/// Summary statistics of one problem instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct InstanceStats {
    pub seed: u64,
    /// `tr(Θᵀ𝓛Θ)` on the graph handed to the policies.
    pub smoothness: f64,
    pub sparsity: f64,
    pub edges: usize,
    /// Mean over users of `‖Δ_i‖` for the true Θ.
    pub mean_delta_truth: f64,
    pub convex: bool,
}

/// A simulated problem: environment plus the graph the policies see.
pub struct Instance {
    pub env: Environment,
    pub graph: Graph,
    pub stats: InstanceStats,
}

/// `(n, d)` actually used: a bundle overrides the config sizes.
pub fn effective_dims(cfg: &ExperimentConfig, bundle: Option<&BanditInstance>) -> (usize, usize) {
    match bundle {
        Some(b) => (b.theta.nrows(), b.theta.ncols()),
        None => (cfg.n, cfg.d),
    }
}

/// Builds the instance for one run seed.
///
/// RBF graphs are built on the rows of Θ₀. The signal is smoothed on the
/// full RBF graph unless `signal.on_thresholded_graph` is set; the policies
/// always receive the thresholded graph.
pub fn build_instance(cfg: &ExperimentConfig, bundle: Option<&BanditInstance>, seed: u64) -> Result<Instance> {
    let (graph, theta, convex) = match bundle {
        Some(b) => (b.graph.clone(), b.theta.clone(), true),
        None => {
            let theta0 = random_theta0(cfg.n, cfg.d, seed);
            let graph = cfg.graph.build(cfg.n, Some(&theta0), seed)?;
            let signal_graph = if cfg.graph.model == GraphModel::Rbf && !cfg.signal.on_thresholded_graph {
                build_rbf_graph(&theta0, cfg.graph.rbf_rho, 0.0)?
            } else {
                graph.clone()
            };
            let pop = UserPopulation::generate(theta0, &laplacians(&signal_graph), cfg.signal.gamma, cfg.signal.norm)?;
            (graph, pop.theta, pop.convex)
        }
    };
    let d = theta.ncols();
    let arms = match (bundle, cfg.arms) {
        (Some(b), _) => {
            if cfg.m > b.arms.nrows() {
                return invalid(format!("m = {} exceeds the {} arms in the bundle", cfg.m, b.arms.nrows()));
            }
            ArmSource::PoolSubset {
                pool: b.arms.clone(),
                m: cfg.m,
            }
        }
        (None, ArmMode::Resample) => ArmSource::Resample { m: cfg.m, d },
        (None, ArmMode::Fixed) => {
            ArmSource::Fixed(uniform_ball(cfg.m, d, &mut crate::stream_rng(seed, STREAM_FIXED_ARMS)))
        }
    };
    let lap = laplacians(&graph);
    let stats = InstanceStats {
        seed,
        smoothness: smoothness(&theta, &lap)?,
        sparsity: sparsity_measure(&graph)?,
        edges: graph.edge_count(),
        mean_delta_truth: 0.0,
        convex,
    };
    let env = Environment::new(theta, arms, cfg.sigma, lap)?;
    let dn = env.delta_truth_norms();
    let stats = InstanceStats {
        mean_delta_truth: dn.iter().sum::<f64>() / dn.len() as f64,
        ..stats
    };
    Ok(Instance { env, graph, stats })
}

fn run_options(cfg: &ExperimentConfig) -> RunOptions {
    RunOptions {
        checkpoint_every: cfg.checkpoint_every,
        probe_approximation: cfg.probe_approximation,
        trace: cfg.trace,
    }
}

/// Grid search of Gob.Lin's λ over `{0, 0.1, …, 1}` on held-out seeds.
/// Ties go to the smaller λ.
pub fn tune_goblin(cfg: &ExperimentConfig, bundle: Option<&BanditInstance>, p: &PolicyConfig) -> Result<f64> {
    let grid: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
    let opts = RunOptions {
        checkpoint_every: cfg.horizon,
        probe_approximation: false,
        trace: false,
    };
    let scores: Vec<f64> = grid
        .par_iter()
        .map(|&lam| -> Result<f64> {
            let mut total = 0.0;
            for r in 0..cfg.tune_runs {
                let seed = cfg.seed + TUNING_SEED_OFFSET + r as u64;
                let inst = build_instance(cfg, bundle, seed)?;
                let mut pol = build_policy(cfg, p, &inst.graph, inst.env.d(), lam)?;
                total += run(&inst.env, pol.as_mut(), cfg.horizon, seed, opts)?.ledger.cumulative();
            }
            Ok(total / cfg.tune_runs as f64)
        })
        .collect::<Result<_>>()?;
    let mut best = 0;
    for (k, &s) in scores.iter().enumerate() {
        if s < scores[best] {
            best = k;
        }
    }
    Ok(grid[best])
}

/// Where and how to execute.
#[derive(Debug, Clone)]
pub struct ExecOptions {
    pub out: PathBuf,
    /// Worker threads for run-level parallelism.
    pub jobs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputEntry {
    pub path: String,
    pub bytes: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeedRecord {
    pub base: u64,
    pub runs: Vec<u64>,
    /// Held-out seeds used for tuning, empty when nothing was tuned.
    pub tuning: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PolicyRecord {
    pub label: String,
    pub kind: PolicyKind,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda_explore: Option<f64>,
    pub completed_runs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NoiseBoundRecord {
    pub threshold: f64,
    /// Fraction of checkpoints where the bound held, per graph-aware policy.
    pub fraction: BTreeMap<String, f64>,
    /// `None` when no policy produced noise-bound diagnostics.
    pub pass: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    /// SHA-256 over the canonical config JSON and any bundle files.
    pub input_hash: String,
    pub seeds: SeedRecord,
    pub policies: Vec<PolicyRecord>,
    pub instances: Vec<InstanceStats>,
    pub noise_bound: NoiseBoundRecord,
    pub partial: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub outputs: Vec<OutputEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicySummary {
    pub label: String,
    pub kind: PolicyKind,
    pub lambda_explore: Option<f64>,
    pub aggregate: Aggregate,
    pub noise_bound_fraction: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub policies: Vec<PolicySummary>,
    pub instances: Vec<InstanceStats>,
    pub manifest: Manifest,
}

impl ExperimentReport {
    pub fn policy(&self, label: &str) -> Option<&PolicySummary> {
        self.policies.iter().find(|p| p.label == label)
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn list_outputs(root: &Path) -> Result<Vec<OutputEntry>> {
    fn walk(root: &Path, dir: &Path, out: &mut Vec<OutputEntry>) -> Result<()> {
        for entry in std::fs::read_dir(dir)? {
            let path = entry?.path();
            if path.is_dir() {
                walk(root, &path, out)?;
            } else if path.file_name().is_some_and(|n| n != "manifest.json") {
                let bytes = std::fs::read(&path)?;
                let rel = path.strip_prefix(root).unwrap_or(&path);
                out.push(OutputEntry {
                    path: rel.to_string_lossy().replace('\\', "/"),
                    bytes: bytes.len() as u64,
                    sha256: sha256_hex(&bytes),
                });
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort_by(|a, b| a.path.cmp(&b.path));
    Ok(out)
}

fn input_hash(cfg: &ExperimentConfig) -> Result<String> {
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(cfg)?);
    if let Some(inst) = &cfg.instance {
        for f in [
            crate::ingest::BUNDLE_GRAPH,
            crate::ingest::BUNDLE_ARMS,
            crate::ingest::BUNDLE_POPULATION,
            crate::ingest::BUNDLE_META,
        ] {
            h.update(std::fs::read(inst.path.join(f))?);
        }
    }
    Ok(hex(&h.finalize()))
}

/// What one finished run hands back to the aggregator.
struct RunResult {
    ledger: RegretLedger,
    nb_hits: usize,
    nb_total: usize,
}

fn create_file(path: &Path) -> Result<std::io::BufWriter<std::fs::File>> {
    Ok(std::io::BufWriter::new(std::fs::File::create(path)?))
}

fn execute_run(
    cfg: &ExperimentConfig,
    inst: &Instance,
    p: &PolicyConfig,
    explore: f64,
    run_idx: usize,
    dir: &Path,
) -> Result<RunResult> {
    let seed = inst.stats.seed;
    let mut pol = build_policy(cfg, p, &inst.graph, inst.env.d(), explore)?;
    let out = run(&inst.env, pol.as_mut(), cfg.horizon, seed, run_options(cfg))?;
    out.ledger.write_csv(create_file(&dir.join(format!("run_{run_idx}_ledger.csv")))?)?;
    if pol.graph_view().is_some() {
        out.diagnostics
            .write_csv(create_file(&dir.join(format!("run_{run_idx}_diagnostics.csv")))?)?;
        if cfg.probe_approximation {
            out.diagnostics
                .write_approx_csv(create_file(&dir.join(format!("run_{run_idx}_approximation.csv")))?)?;
        }
    }
    if cfg.trace {
        write_trace(create_file(&dir.join(format!("run_{run_idx}_trace.csv")))?, &out.trace)?;
    }
    let pairs: Vec<(f64, f64)> = out
        .diagnostics
        .rows
        .iter()
        .filter_map(|r| Some((r.nb_lhs?, r.nb_rhs?)))
        .collect();
    Ok(RunResult {
        ledger: out.ledger,
        nb_hits: pairs.iter().filter(|(l, r)| l <= r).count(),
        nb_total: pairs.len(),
    })
}

fn thread_pool(jobs: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::State(format!("cannot start worker pool: {e}")))
}

fn write_summaries(out: &Path, summaries: &[PolicySummary]) -> Result<()> {
    let mut w = csv::Writer::from_writer(create_file(&out.join("regret_summary.csv"))?);
    w.write_record(["policy", "t", "mean", "std"])?;
    for s in summaries {
        for (t, (m, sd)) in s.aggregate.mean.iter().zip(&s.aggregate.std).enumerate() {
            w.write_record([s.label.clone(), (t + 1).to_string(), m.to_string(), sd.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create_file(&out.join("per_user_regret.csv"))?);
    w.write_record(["policy", "user", "mean_regret"])?;
    for s in summaries {
        for (u, r) in s.aggregate.per_user_mean.iter().enumerate() {
            w.write_record([s.label.clone(), u.to_string(), r.to_string()])?;
        }
    }
    w.flush()?;
    let mut w = csv::Writer::from_writer(create_file(&out.join("final.csv"))?);
    w.write_record([
        "policy",
        "runs",
        "final_mean",
        "final_std",
        "final_se",
        "lambda_explore",
        "noise_bound_fraction",
    ])?;
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for s in summaries {
        w.write_record([
            s.label.clone(),
            s.aggregate.runs.to_string(),
            s.aggregate.final_mean().to_string(),
            s.aggregate.final_std().to_string(),
            s.aggregate.final_se().to_string(),
            opt(s.lambda_explore),
            opt(s.noise_bound_fraction),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every configured policy `runs` times and writes ledgers, diagnostics,
/// summaries and `manifest.json` under `exec.out`.
///
/// If any run fails, the completed outputs are kept, the manifest is written
/// with `partial = true`, and the first error is returned.
pub fn run_experiment(cfg: &ExperimentConfig, exec: &ExecOptions) -> Result<ExperimentReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&exec.out)?;
    let bundle = match &cfg.instance {
        Some(i) => Some(read_bundle(&i.path)?),
        None => None,
    };
    let bundle = bundle.as_ref();
    let run_seeds: Vec<u64> = (0..cfg.runs as u64).map(|k| cfg.seed + k).collect();
    let pool = thread_pool(exec.jobs)?;

    let mut first_err: Option<Error> = None;
    let instances: Vec<Instance> = pool.install(|| {
        run_seeds
            .par_iter()
            .map(|&s| build_instance(cfg, bundle, s))
            .collect::<Result<Vec<_>>>()
    })?;

    let mut explore = Vec::with_capacity(cfg.policies.len());
    let mut tuning_seeds = Vec::new();
    for p in &cfg.policies {
        if p.wants_tuning() {
            tuning_seeds = (0..cfg.tune_runs as u64).map(|r| cfg.seed + TUNING_SEED_OFFSET + r).collect();
            explore.push(Some(pool.install(|| tune_goblin(cfg, bundle, p))?));
        } else if let (PolicyKind::Goblin, Some(ExploreSetting::Value(v))) = (p.kind, &p.lambda_explore) {
            explore.push(Some(*v));
        } else if p.kind == PolicyKind::Goblin {
            explore.push(Some(GobLinParams::default().lambda_explore));
        } else {
            explore.push(None);
        }
    }

    for p in &cfg.policies {
        std::fs::create_dir_all(exec.out.join(p.label()))?;
    }
    let tasks: Vec<(usize, usize)> = (0..cfg.policies.len())
        .flat_map(|p| (0..cfg.runs).map(move |k| (p, k)))
        .collect();
    let results: Vec<Result<RunResult>> = pool.install(|| {
        tasks
            .par_iter()
            .map(|&(p, k)| {
                let pc = &cfg.policies[p];
                let dir = exec.out.join(pc.label());
                execute_run(cfg, &instances[k], pc, explore[p].unwrap_or(0.0), k, &dir)
            })
            .collect()
    });

    let mut per_policy: Vec<Vec<RunResult>> = (0..cfg.policies.len()).map(|_| Vec::new()).collect();
    let mut failed = vec![false; cfg.policies.len()];
    for (&(p, _), r) in tasks.iter().zip(results) {
        match r {
            Ok(r) => per_policy[p].push(r),
            Err(e) => {
                failed[p] = true;
                first_err.get_or_insert(e);
            }
        }
    }

    let mut summaries = Vec::new();
    let mut records = Vec::new();
    let mut fractions = BTreeMap::new();
    for (p, pc) in cfg.policies.iter().enumerate() {
        let done = &per_policy[p];
        records.push(PolicyRecord {
            label: pc.label(),
            kind: pc.kind,
            lambda_explore: explore[p],
            completed_runs: done.len(),
        });
        if failed[p] || done.is_empty() {
            continue;
        }
        let ledgers: Vec<RegretLedger> = done.iter().map(|r| r.ledger.clone()).collect();
        let total: usize = done.iter().map(|r| r.nb_total).sum();
        let frac = (total > 0).then(|| done.iter().map(|r| r.nb_hits).sum::<usize>() as f64 / total as f64);
        if let Some(f) = frac {
            fractions.insert(pc.label(), f);
        }
        summaries.push(PolicySummary {
            label: pc.label(),
            kind: pc.kind,
            lambda_explore: explore[p],
            aggregate: aggregate_runs(&ledgers)?,
            noise_bound_fraction: frac,
        });
    }
    write_summaries(&exec.out, &summaries)?;

    let pass = (!fractions.is_empty()).then(|| fractions.values().all(|&f| f >= cfg.noise_bound_threshold));
    let manifest = Manifest {
        schema_version: MANIFEST_SCHEMA_VERSION,
        config: cfg.clone(),
        input_hash: input_hash(cfg)?,
        seeds: SeedRecord {
            base: cfg.seed,
            runs: run_seeds,
            tuning: tuning_seeds,
        },
        policies: records,
        instances: instances.iter().map(|i| i.stats.clone()).collect(),
        noise_bound: NoiseBoundRecord {
            threshold: cfg.noise_bound_threshold,
            fraction: fractions,
            pass,
        },
        partial: first_err.is_some(),
        error: first_err.as_ref().map(|e| e.to_string()),
        outputs: list_outputs(&exec.out)?,
    };
    std::fs::write(exec.out.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    if let Some(e) = first_err {
        return Err(e);
    }
    Ok(ExperimentReport {
        policies: summaries,
        instances: manifest.instances.clone(),
        manifest,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Gamma,
    Threshold,
    ErP,
    BaM,
    WsP,
    WsM,
}

impl SweepAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            SweepAxis::Gamma => "gamma",
            SweepAxis::Threshold => "threshold",
            SweepAxis::ErP => "er_p",
            SweepAxis::BaM => "ba_m",
            SweepAxis::WsP => "ws_p",
            SweepAxis::WsM => "ws_m",
        }
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "gamma" => SweepAxis::Gamma,
            "threshold" => SweepAxis::Threshold,
            "er_p" => SweepAxis::ErP,
            "ba_m" => SweepAxis::BaM,
            "ws_p" => SweepAxis::WsP,
            "ws_m" => SweepAxis::WsM,
            _ => return invalid(format!("unknown sweep axis {s:?}")),
        })
    }
}

fn as_count(axis: SweepAxis, v: f64) -> Result<usize> {
    if v >= 0.0 && v.fract() == 0.0 && v.is_finite() {
        Ok(v as usize)
    } else {
        invalid(format!("{} needs whole numbers, got {v}", axis.as_str()))
    }
}

/// Sets `axis = value` in a copy of `cfg`; errors if the axis does not apply.
pub fn apply_axis(cfg: &ExperimentConfig, axis: SweepAxis, value: f64) -> Result<ExperimentConfig> {
    if cfg.instance.is_some() {
        return invalid(format!("axis {} does not apply to a fixed data instance", axis.as_str()));
    }
    let need = match axis {
        SweepAxis::Gamma => None,
        SweepAxis::Threshold => Some(GraphModel::Rbf),
        SweepAxis::ErP => Some(GraphModel::Er),
        SweepAxis::BaM => Some(GraphModel::Ba),
        SweepAxis::WsP | SweepAxis::WsM => Some(GraphModel::Ws),
    };
    if let Some(model) = need {
        if cfg.graph.model != model {
            return invalid(format!(
                "axis {} does not apply to graph model {:?}",
                axis.as_str(),
                cfg.graph.model
            ));
        }
    }
    let mut c = cfg.clone();
    match axis {
        SweepAxis::Gamma => c.signal.gamma = value,
        SweepAxis::Threshold => c.graph.sparsity_threshold = value,
        SweepAxis::ErP => c.graph.er_p = value,
        SweepAxis::BaM => c.graph.ba_m = as_count(axis, value)?,
        SweepAxis::WsP => c.graph.ws_p = value,
        SweepAxis::WsM => c.graph.ws_m = as_count(axis, value)?,
    }
    c.validate().map_err(|e| Error::InvalidInput(e.to_string()))?;
    Ok(c)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub axis: String,
    pub value: f64,
    pub policy: String,
    pub final_mean: f64,
    pub final_std: f64,
    pub final_se: f64,
    /// Mean over runs of `tr(Θᵀ𝓛Θ)`.
    pub sm: f64,
    /// Mean over runs of the graph sparsity measure.
    pub sp: f64,
    /// Mean over runs and users of `‖Δ_i‖` for the true Θ.
    pub delta_truth: f64,
}

/// One experiment per value under `<out>/<axis>_<value>`, plus `sweep_summary.csv`.
pub fn sweep(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64], exec: &ExecOptions) -> Result<Vec<SweepRow>> {
    if values.is_empty() {
        return invalid("sweep needs at least one value");
    }
    let configs: Vec<ExperimentConfig> = values.iter().map(|&v| apply_axis(cfg, axis, v)).collect::<Result<_>>()?;
    std::fs::create_dir_all(&exec.out)?;
    let mut rows = Vec::new();
    for (&v, c) in values.iter().zip(&configs) {
        let sub = ExecOptions {
            out: exec.out.join(format!("{}_{v}", axis.as_str())),
            jobs: exec.jobs,
        };
        let rep = run_experiment(c, &sub)?;
        let k = rep.instances.len() as f64;
        let sm = rep.instances.iter().map(|s| s.smoothness).sum::<f64>() / k;
        let sp = rep.instances.iter().map(|s| s.sparsity).sum::<f64>() / k;
        let dt = rep.instances.iter().map(|s| s.mean_delta_truth).sum::<f64>() / k;
        for p in &rep.policies {
            rows.push(SweepRow {
                axis: axis.as_str().to_string(),
                value: v,
                policy: p.label.clone(),
                final_mean: p.aggregate.final_mean(),
                final_std: p.aggregate.final_std(),
                final_se: p.aggregate.final_se(),
                sm,
                sp,
                delta_truth: dt,
            });
        }
    }
    let mut w = csv::Writer::from_writer(create_file(&exec.out.join("sweep_summary.csv"))?);
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub policy: String,
    pub n: usize,
    pub steps: usize,
    /// Median wall time of one `observe` call, nanoseconds.
    pub median_ns: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RatioRow {
    pub policy: String,
    pub n_from: usize,
    pub n_to: usize,
    pub ratio: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let k = v.len();
    if k % 2 == 1 {
        v[k / 2]
    } else {
        0.5 * (v[k / 2 - 1] + v[k / 2])
    }
}

/// Median `observe` latency for one policy on one instance over `cfg.horizon` steps.
pub fn time_observe(cfg: &ExperimentConfig, inst: &Instance, p: &PolicyConfig) -> Result<f64> {
    let explore = match p.lambda_explore {
        Some(ExploreSetting::Value(v)) => v,
        _ => GobLinParams::default().lambda_explore,
    };
    let mut pol = build_policy(cfg, p, &inst.graph, inst.env.d(), explore)?;
    let seed = inst.stats.seed;
    let mut sim = crate::stream_rng(seed, crate::STREAM_SIM);
    let mut arm_rng = crate::stream_rng(seed, crate::STREAM_ARMS);
    let noise = Normal::new(0.0, cfg.sigma.max(f64::MIN_POSITIVE)).map_err(|e| Error::InvalidInput(e.to_string()))?;
    let mut times = Vec::with_capacity(cfg.horizon);
    for _ in 0..cfg.horizon {
        let user = sim.random_range(0..inst.env.n());
        let arms = inst.env.arms.draw(&mut arm_rng);
        let sel = pol.select(user, &arms)?;
        let x = arms.row(sel.arm).transpose();
        let y = x.dot(&inst.env.theta.row(user).transpose()) + noise.sample(&mut sim);
        let start = Instant::now();
        pol.observe(user, &x, y)?;
        times.push(start.elapsed().as_nanos() as f64);
    }
    Ok(median(times))
}

/// Per-step `observe` latency of every configured policy at each `n`, and the
/// latency ratio between consecutive sizes. Writes `bench.csv` and
/// `bench_ratios.csv` when `out` is given.
pub fn bench_scaling(cfg: &ExperimentConfig, n_values: &[usize], out: Option<&Path>) -> Result<(Vec<BenchRow>, Vec<RatioRow>)> {
    if n_values.is_empty() || n_values.windows(2).any(|w| w[0] >= w[1]) || n_values[0] == 0 {
        return invalid("n_values must be positive and strictly increasing");
    }
    if cfg.instance.is_some() {
        return invalid("bench needs a synthetic instance so n can vary");
    }
    let mut rows = Vec::new();
    for &n in n_values {
        let mut c = cfg.clone();
        c.n = n;
        let inst = build_instance(&c, None, c.seed)?;
        for p in &c.policies {
            rows.push(BenchRow {
                policy: p.label(),
                n,
                steps: c.horizon,
                median_ns: time_observe(&c, &inst, p)?,
            });
        }
    }
    let mut ratios = Vec::new();
    for p in &cfg.policies {
        let mine: Vec<&BenchRow> = rows.iter().filter(|r| r.policy == p.label()).collect();
        for w in mine.windows(2) {
            ratios.push(RatioRow {
                policy: p.label(),
                n_from: w[0].n,
                n_to: w[1].n,
                ratio: w[1].median_ns / w[0].median_ns,
            });
        }
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_writer(create_file(&dir.join("bench.csv"))?);
        for r in &rows {
            w.serialize(r)?;
        }
        w.flush()?;
        let mut w = csv::Writer::from_writer(create_file(&dir.join("bench_ratios.csv"))?);
        for r in &ratios {
            w.serialize(r)?;
        }
        w.flush()?;
    }
    Ok((rows, ratios))
}

/// Matrix of per-step cumulative regret, one column per run; handy for tests.
pub fn ledger_matrix(ledgers: &[RegretLedger]) -> DMatrix<f64> {
    let h = ledgers.first().map_or(0, |l| l.horizon());
    DMatrix::from_fn(h, ledgers.len(), |t, k| ledgers[k].per_step[t].cum_regret)
}
