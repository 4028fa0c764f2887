//! Multi-user bandit simulator.
//!
//! Each round a user is drawn uniformly, the policy picks one of the offered
//! arms, and the payoff `xᵀθ_i + η` with `η ~ N(0, σ²)` is fed back. Regret is
//! measured on noiseless means. Graph-aware policies additionally feed the
//! Ψ ratio, the ‖Δ̂_i‖ snapshots and the noise-bound monitor.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::estimator::{delta_hat, estimate_local, quad, solve_joint, spd_inverse, PrecisionState};
use crate::graph::LaplacianSet;
use crate::policies::{Policy, TraceRow};

const NORM_TOL: f64 = 1e-12;

/// `m` points uniform in the unit ball of `ℝ^d`, one per row.
pub fn uniform_ball(m: usize, d: usize, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(m, d);
    for a in 0..m {
        let dir: DVector<f64> = DVector::from_fn(d, |_, _| StandardNormal.sample(rng));
        let r: f64 = rng.random::<f64>().powf(1.0 / d as f64);
        let norm = dir.norm();
        if norm > 0.0 {
            out.set_row(a, &(dir * (r / norm)).transpose());
        }
    }
    out
}

/// Where each round's candidate arms come from.
#[derive(Debug, Clone, PartialEq)]
pub enum ArmSource {
    /// The same `m × d` matrix every round.
    Fixed(DMatrix<f64>),
    /// `m` fresh arms uniform in the unit ball every round.
    Resample { m: usize, d: usize },
    /// `m` distinct rows of a larger pool every round.
    PoolSubset { pool: DMatrix<f64>, m: usize },
}

impl ArmSource {
    pub fn dim(&self) -> usize {
        match self {
            ArmSource::Fixed(a) => a.ncols(),
            ArmSource::Resample { d, .. } => *d,
            ArmSource::PoolSubset { pool, .. } => pool.ncols(),
        }
    }

    pub fn draw(&self, rng: &mut ChaCha8Rng) -> DMatrix<f64> {
        match self {
            ArmSource::Fixed(a) => a.clone(),
            ArmSource::Resample { m, d } => uniform_ball(*m, *d, rng),
            ArmSource::PoolSubset { pool, m } => {
                let idx = rand::seq::index::sample(rng, pool.nrows(), *m);
                let rows: Vec<usize> = idx.into_iter().collect();
                pool.select_rows(&rows)
            }
        }
    }

    fn validate(&self) -> Result<()> {
        let check = |a: &DMatrix<f64>| -> Result<()> {
            if a.nrows() == 0 {
                return invalid("arm set is empty");
            }
            for (k, r) in a.row_iter().enumerate() {
                let n = r.norm();
                if !n.is_finite() || n > 1.0 + NORM_TOL {
                    return invalid(format!("arm {k} has norm {n} > 1"));
                }
            }
            Ok(())
        };
        match self {
            ArmSource::Fixed(a) => check(a),
            ArmSource::Resample { m, d } => {
                if *m == 0 || *d == 0 {
                    return invalid("arm count and dimension must be positive");
                }
                Ok(())
            }
            ArmSource::PoolSubset { pool, m } => {
                check(pool)?;
                if *m == 0 || *m > pool.nrows() {
                    return invalid(format!("cannot draw {m} arms from a pool of {}", pool.nrows()));
                }
                Ok(())
            }
        }
    }
}

/// Ground truth, arm source, noise level and the graph the learner is given.
#[derive(Debug, Clone)]
pub struct Environment {
    pub theta: DMatrix<f64>,
    pub arms: ArmSource,
    pub sigma: f64,
    pub lap: LaplacianSet,
}

impl Environment {
    pub fn new(theta: DMatrix<f64>, arms: ArmSource, sigma: f64, lap: LaplacianSet) -> Result<Self> {
        let env = Self { theta, arms, sigma, lap };
        env.check_invariants()?;
        Ok(env)
    }

    pub fn n(&self) -> usize {
        self.theta.nrows()
    }

    pub fn d(&self) -> usize {
        self.theta.ncols()
    }

    /// Unit-norm arms and users, finite entries, consistent sizes.
    pub fn check_invariants(&self) -> Result<()> {
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return invalid(format!("sigma = {} must be finite and nonnegative", self.sigma));
        }
        if self.arms.dim() != self.d() {
            return Err(Error::DimensionMismatch {
                expected: format!("arms of dimension {}", self.d()),
                got: format!("dimension {}", self.arms.dim()),
            });
        }
        if self.lap.n() != self.n() {
            return Err(Error::DimensionMismatch {
                expected: format!("graph on {} users", self.n()),
                got: format!("{} nodes", self.lap.n()),
            });
        }
        for (i, r) in self.theta.row_iter().enumerate() {
            let n = r.norm();
            if !n.is_finite() || n > 1.0 + NORM_TOL {
                return invalid(format!("user {i} has norm {n} > 1"));
            }
        }
        self.arms.validate()
    }

    /// `tr(Θᵀ𝓛Θ)` of the ground truth on the learner's graph.
    pub fn smoothness_of_truth(&self) -> f64 {
        (self.theta.transpose() * &self.lap.random_walk * &self.theta).trace()
    }

    /// `‖Δ_i‖₂` of the ground truth for every user.
    pub fn delta_truth_norms(&self) -> Vec<f64> {
        (0..self.n()).map(|i| delta_hat(i, &self.theta, &self.lap).norm()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunOptions {
    /// Diagnostics are logged every this many steps.
    pub checkpoint_every: usize,
    /// Log joint / local / ridge estimation errors at checkpoints.
    pub probe_approximation: bool,
    pub trace: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            checkpoint_every: 10,
            probe_approximation: false,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LedgerRow {
    pub t: usize,
    pub user: usize,
    pub arm: usize,
    pub regret: f64,
    pub cum_regret: f64,
}

/// Per-step pseudo-regret with its running total and per-user split.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RegretLedger {
    pub per_step: Vec<LedgerRow>,
    pub per_user: Vec<f64>,
}

impl RegretLedger {
    pub fn new(n: usize) -> Self {
        Self {
            per_step: Vec::new(),
            per_user: vec![0.0; n],
        }
    }

    pub fn record(&mut self, user: usize, arm: usize, regret: f64) {
        let cum = self.cumulative() + regret;
        self.per_step.push(LedgerRow {
            t: self.per_step.len() + 1,
            user,
            arm,
            regret,
            cum_regret: cum,
        });
        self.per_user[user] += regret;
    }

    pub fn cumulative(&self) -> f64 {
        self.per_step.last().map_or(0.0, |r| r.cum_regret)
    }

    pub fn horizon(&self) -> usize {
        self.per_step.len()
    }

    pub fn curve(&self) -> Vec<f64> {
        self.per_step.iter().map(|r| r.cum_regret).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.per_step {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagRow {
    pub t: usize,
    pub user: usize,
    pub psi: Option<f64>,
    pub delta_norm: Option<f64>,
    pub nb_lhs: Option<f64>,
    pub nb_rhs: Option<f64>,
}

/// Mean estimation errors over users at one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ApproxRow {
    pub t: usize,
    pub joint_err: f64,
    pub local_err: f64,
    pub ridge_err: f64,
    pub local_joint_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Diagnostics {
    pub psi_num: Vec<f64>,
    pub psi_den: Vec<f64>,
    pub rows: Vec<DiagRow>,
    pub approx: Vec<ApproxRow>,
    pub smoothness_of_truth: f64,
    pub delta_truth: Vec<f64>,
}

impl Diagnostics {
    pub fn new(n: usize) -> Self {
        Self {
            psi_num: vec![0.0; n],
            psi_den: vec![0.0; n],
            ..Default::default()
        }
    }

    /// `Ψ_i = Σ‖x‖²_{Λ⁻¹} / Σ‖x‖²_{V⁻¹}`, absent before the first nonzero serve.
    pub fn psi(&self, i: usize) -> Option<f64> {
        (self.psi_den[i] > 0.0).then(|| self.psi_num[i] / self.psi_den[i])
    }

    /// Fraction of logged checkpoints where the noise bound held.
    pub fn noise_bound_fraction(&self) -> Option<f64> {
        let pairs: Vec<(f64, f64)> = self
            .rows
            .iter()
            .filter_map(|r| Some((r.nb_lhs?, r.nb_rhs?)))
            .collect();
        if pairs.is_empty() {
            return None;
        }
        let ok = pairs.iter().filter(|(l, r)| l <= r).count();
        Some(ok as f64 / pairs.len() as f64)
    }

    pub fn write_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_approx_csv<W: std::io::Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.approx {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Adds one served arm to user `i`'s Ψ accumulators.
pub fn psi_update(diag: &mut Diagnostics, i: usize, x: &DVector<f64>, prec: &PrecisionState) -> Result<()> {
    diag.psi_num[i] += quad(&spd_inverse(&prec.lambda_i)?, x);
    diag.psi_den[i] += quad(&spd_inverse(&prec.v_i)?, x);
    Ok(())
}

/// Both sides of `‖ξ_i − α Σ_j 𝓛_ij A_j⁻¹ ξ_i‖_{V_i⁻¹} ≤ ‖ξ_i‖_{V_i⁻¹}`.
pub fn noise_bound_sides(
    i: usize,
    xi: &DVector<f64>,
    stats: &[crate::estimator::UserStats],
    lap: &LaplacianSet,
    alpha: f64,
) -> Result<(f64, f64)> {
    let d = xi.len();
    let mut mix = DMatrix::<f64>::zeros(d, d);
    for (j, s) in stats.iter().enumerate() {
        let l = lap.random_walk[(i, j)];
        if l != 0.0 {
            mix += s.gram_inv() * l;
        }
    }
    let lhs_vec = xi - mix * xi * alpha;
    let v = stats[i].gram() + DMatrix::identity(d, d) * (alpha * lap.random_walk[(i, i)]);
    let v_inv = spd_inverse(&v)?;
    Ok((quad(&v_inv, &lhs_vec).sqrt(), quad(&v_inv, xi).sqrt()))
}

/// Output of one simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub ledger: RegretLedger,
    pub diagnostics: Diagnostics,
    pub trace: Vec<TraceRow>,
}

/// One round: serve a uniform user, charge regret, update diagnostics.
#[allow(clippy::too_many_arguments)]
pub fn step(
    env: &Environment,
    policy: &mut dyn Policy,
    ledger: &mut RegretLedger,
    diag: &mut Diagnostics,
    xi: &mut [DVector<f64>],
    sim_rng: &mut ChaCha8Rng,
    arm_rng: &mut ChaCha8Rng,
    trace: Option<&mut Vec<TraceRow>>,
) -> Result<()> {
    let user = sim_rng.random_range(0..env.n());
    let arms = env.arms.draw(arm_rng);
    let sel = policy.select(user, &arms)?;
    let theta_i = env.theta.row(user).transpose();
    let means = &arms * &theta_i;
    let best = means.max();
    let x = arms.row(sel.arm).transpose();
    let mean = means[sel.arm];
    let eta = if env.sigma > 0.0 {
        Normal::new(0.0, env.sigma)
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .sample(sim_rng)
    } else {
        0.0
    };
    let y = mean + eta;
    policy.observe(user, &x, y)?;
    ledger.record(user, sel.arm, (best - mean).max(0.0));
    xi[user].axpy(eta, &x, 1.0);
    if let Some(prec) = &sel.precision {
        psi_update(diag, user, &x, prec)?;
    }
    if let Some(tr) = trace {
        tr.push(TraceRow {
            t: ledger.horizon(),
            user,
            arm: sel.arm,
            ucb: sel.ucb,
            beta: sel.beta,
            payoff: y,
        });
    }
    Ok(())
}

fn checkpoint(env: &Environment, policy: &dyn Policy, t: usize, diag: &mut Diagnostics, xi: &[DVector<f64>], probe: bool) -> Result<()> {
    let Some(view) = policy.graph_view() else {
        return Ok(());
    };
    for (i, x) in xi.iter().enumerate().take(env.n()) {
        if view.stats[i].count() == 0 {
            continue;
        }
        let (lhs, rhs) = noise_bound_sides(i, x, view.stats, view.lap, view.alpha)?;
        diag.rows.push(DiagRow {
            t,
            user: i,
            psi: diag.psi(i),
            delta_norm: Some(delta_hat(i, view.theta_hat, view.lap).norm()),
            nb_lhs: Some(lhs),
            nb_rhs: Some(rhs),
        });
    }
    if probe {
        let est = crate::estimator::EstimatorState { users: view.stats.to_vec() };
        let joint = solve_joint(&est.joint_state(view.joint_ridge), view.lap, view.alpha)?;
        let n = env.n() as f64;
        let mut row = ApproxRow {
            t,
            joint_err: 0.0,
            local_err: 0.0,
            ridge_err: 0.0,
            local_joint_gap: 0.0,
        };
        for i in 0..env.n() {
            let truth = env.theta.row(i).transpose();
            let local = estimate_local(i, view.stats, view.lap, view.alpha);
            let j = joint.row(i).transpose();
            row.joint_err += (&j - &truth).norm() / n;
            row.local_err += (&local - &truth).norm() / n;
            row.ridge_err += (view.stats[i].ridge() - &truth).norm() / n;
            row.local_joint_gap += (&local - &j).norm() / n;
        }
        diag.approx.push(row);
    }
    Ok(())
}

/// Runs `horizon` rounds. Deterministic in `(env, policy config, seed)`.
pub fn run(env: &Environment, policy: &mut dyn Policy, horizon: usize, seed: u64, opts: RunOptions) -> Result<RunOutput> {
    if horizon == 0 {
        return invalid("horizon must be at least 1");
    }
    if opts.checkpoint_every == 0 {
        return invalid("checkpoint_every must be at least 1");
    }
    let mut sim_rng = crate::stream_rng(seed, crate::STREAM_SIM);
    let mut arm_rng = crate::stream_rng(seed, crate::STREAM_ARMS);
    let mut ledger = RegretLedger::new(env.n());
    let mut diag = Diagnostics::new(env.n());
    diag.smoothness_of_truth = env.smoothness_of_truth();
    diag.delta_truth = env.delta_truth_norms();
    let mut xi = vec![DVector::zeros(env.d()); env.n()];
    let mut trace = Vec::new();
    for t in 1..=horizon {
        step(
            env,
            policy,
            &mut ledger,
            &mut diag,
            &mut xi,
            &mut sim_rng,
            &mut arm_rng,
            opts.trace.then_some(&mut trace),
        )?;
        if t % opts.checkpoint_every == 0 {
            checkpoint(env, policy, t, &mut diag, &xi, opts.probe_approximation)?;
        }
    }
    Ok(RunOutput {
        ledger,
        diagnostics: diag,
        trace,
    })
}

/// Pointwise statistics of several runs' cumulative regret.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub mean: Vec<f64>,
    /// Sample standard deviation (zero for a single run).
    pub std: Vec<f64>,
    pub per_user_mean: Vec<f64>,
    pub runs: usize,
}

impl Aggregate {
    pub fn final_mean(&self) -> f64 {
        *self.mean.last().unwrap_or(&0.0)
    }

    pub fn final_std(&self) -> f64 {
        *self.std.last().unwrap_or(&0.0)
    }

    /// Standard error of the final mean.
    pub fn final_se(&self) -> f64 {
        self.final_std() / (self.runs as f64).sqrt()
    }
}

pub fn aggregate_runs(ledgers: &[RegretLedger]) -> Result<Aggregate> {
    let Some(first) = ledgers.first() else {
        return invalid("no ledgers to aggregate");
    };
    let h = first.horizon();
    let n = first.per_user.len();
    if ledgers.iter().any(|l| l.horizon() != h || l.per_user.len() != n) {
        return invalid("ledgers have mismatched horizons or user counts");
    }
    let k = ledgers.len() as f64;
    let mut mean = vec![0.0; h];
    let mut std = vec![0.0; h];
    for t in 0..h {
        let vals: Vec<f64> = ledgers.iter().map(|l| l.per_step[t].cum_regret).collect();
        let m = vals.iter().sum::<f64>() / k;
        mean[t] = m;
        if ledgers.len() > 1 {
            std[t] = (vals.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (k - 1.0)).sqrt();
        }
    }
    let per_user_mean = (0..n)
        .map(|i| ledgers.iter().map(|l| l.per_user[i]).sum::<f64>() / k)
        .collect();
    Ok(Aggregate {
        mean,
        std,
        per_user_mean,
        runs: ledgers.len(),
    })
}
