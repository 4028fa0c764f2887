//! Arm-selection policies behind one interface.
//!
//! Every policy is deterministic given its state and the offered arms; the
//! only randomness in a run comes from the environment. `select` and
//! `observe` must alternate, and violations are reported as state errors.

mod club;
mod goblin;
mod graphucb;
mod linucb;

pub use club::{Club, ClubParams};
pub use goblin::{GobLin, GobLinParams};
pub use graphucb::{GraphUcb, GraphUcbParams, UpdateRule};
pub use linucb::{LinUcb, LinUcbParams};

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{invalid, Error, Result};
use crate::estimator::{PrecisionState, UserStats};
use crate::graph::LaplacianSet;

/// Outcome of one `select` call.
#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    pub arm: usize,
    /// UCB index of the chosen arm.
    pub ucb: f64,
    pub beta: f64,
    /// `Λ_i` and `V_i` used for this choice, for graph-aware policies.
    pub precision: Option<PrecisionState>,
}

/// Read-only view of a Laplacian-regularized estimator, for diagnostics.
pub struct GraphView<'a> {
    pub stats: &'a [UserStats],
    pub lap: &'a LaplacianSet,
    pub alpha: f64,
    /// Ridge on the joint system's diagonal blocks.
    pub joint_ridge: f64,
    pub theta_hat: &'a DMatrix<f64>,
}

pub trait Policy: Send {
    fn name(&self) -> &str;

    /// Chooses one row of `arms` (an `m × d` matrix) for `user`.
    fn select(&mut self, user: usize, arms: &DMatrix<f64>) -> Result<Selection>;

    /// Feeds back the payoff of the arm chosen by the last `select`.
    fn observe(&mut self, user: usize, x: &DVector<f64>, y: f64) -> Result<()>;

    /// Current estimate, row `i` for user `i`.
    fn theta_hat(&self) -> DMatrix<f64>;

    fn graph_view(&self) -> Option<GraphView<'_>> {
        None
    }
}

/// Enforces the select/observe alternation.
#[derive(Debug, Clone, Default)]
pub(crate) struct Gate {
    pending: Option<usize>,
}

impl Gate {
    pub fn open(&mut self, user: usize, n: usize, arms: &DMatrix<f64>, d: usize) -> Result<()> {
        if let Some(p) = self.pending {
            return Err(Error::State(format!("select for user {user} while user {p} awaits observe")));
        }
        if user >= n {
            return invalid(format!("user {user} out of range (n = {n})"));
        }
        if arms.nrows() == 0 {
            return invalid("empty arm set");
        }
        if arms.ncols() != d {
            return Err(Error::DimensionMismatch {
                expected: format!("arms with {d} columns"),
                got: format!("{} columns", arms.ncols()),
            });
        }
        self.pending = Some(user);
        Ok(())
    }

    /// Rolls back `open` when selection itself failed.
    pub fn abort(&mut self) {
        self.pending = None;
    }

    pub fn close(&mut self, user: usize) -> Result<()> {
        match self.pending {
            Some(p) if p == user => {
                self.pending = None;
                Ok(())
            }
            Some(p) => Err(Error::State(format!("observe for user {user} but select was for user {p}"))),
            None => Err(Error::State(format!("observe for user {user} without a prior select"))),
        }
    }
}

/// Index of the largest value; ties go to the lowest index and NaN never wins.
pub fn argmax_lowest(values: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (k, &v) in values.iter().enumerate() {
        if v > best_v {
            best = k;
            best_v = v;
        }
    }
    best
}

/// `xᵀθ + β·sqrt(xᵀ P x)` for every row `x` of `arms`.
pub fn ucb_indices(arms: &DMatrix<f64>, theta: &DVector<f64>, beta: f64, p: &DMatrix<f64>) -> Vec<f64> {
    let means = arms * theta;
    let ap = arms * p;
    (0..arms.nrows())
        .map(|a| {
            let w = ap.row(a).dot(&arms.row(a)).max(0.0);
            means[a] + beta * w.sqrt()
        })
        .collect()
}

pub(crate) fn pick(ucb: Vec<f64>, beta: f64, precision: Option<PrecisionState>) -> Selection {
    let arm = argmax_lowest(&ucb);
    Selection {
        arm,
        ucb: ucb[arm],
        beta,
        precision,
    }
}

/// Greedy policy that knows the true Θ. Used to test the simulator.
pub struct Oracle {
    theta: DMatrix<f64>,
    gate: Gate,
}

impl Oracle {
    pub fn new(theta: DMatrix<f64>) -> Self {
        Self { theta, gate: Gate::default() }
    }
}

impl Policy for Oracle {
    fn name(&self) -> &str {
        "oracle"
    }

    fn select(&mut self, user: usize, arms: &DMatrix<f64>) -> Result<Selection> {
        self.gate.open(user, self.theta.nrows(), arms, self.theta.ncols())?;
        let means = arms * self.theta.row(user).transpose();
        Ok(pick(means.iter().copied().collect(), 0.0, None))
    }

    fn observe(&mut self, user: usize, _x: &DVector<f64>, _y: f64) -> Result<()> {
        self.gate.close(user)
    }

    fn theta_hat(&self) -> DMatrix<f64> {
        self.theta.clone()
    }
}

/// One row of a selection trace.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRow {
    pub t: usize,
    pub user: usize,
    pub arm: usize,
    pub ucb: f64,
    pub beta: f64,
    pub payoff: f64,
}

/// Streams trace rows as CSV with a header.
pub fn write_trace<W: std::io::Write>(out: W, rows: &[TraceRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
