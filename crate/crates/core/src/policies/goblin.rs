use nalgebra::{DMatrix, DVector};

use super::{pick, ucb_indices, Gate, Policy, Selection};
use crate::error::{invalid, Result};
use crate::estimator::JointSolver;
use crate::graph::{laplacians, Graph};

#[derive(Debug, Clone, PartialEq)]
pub struct GobLinParams {
    /// Weight on the combinatorial Laplacian.
    pub alpha: f64,
    /// λ in the width `λ·sqrt(log(t+1))`.
    pub lambda_explore: f64,
    /// Ridge keeping `M` invertible before data arrives.
    pub lambda_gram: f64,
}

impl Default for GobLinParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            lambda_explore: 0.3,
            lambda_gram: 0.01,
        }
    }
}

/// Gob.Lin: joint ridge over all users coupled by `L = D − W`, with the
/// exploration width `λ·sqrt(log(t+1))` shared by every arm.
pub struct GobLin {
    params: GobLinParams,
    n: usize,
    d: usize,
    solver: JointSolver,
    theta: DMatrix<f64>,
    t: usize,
    gate: Gate,
}

impl GobLin {
    pub fn new(graph: &Graph, d: usize, params: GobLinParams) -> Result<Self> {
        if !(params.lambda_explore >= 0.0) {
            return invalid(format!("lambda_explore = {} must be nonnegative", params.lambda_explore));
        }
        if !(params.alpha >= 0.0 && params.lambda_gram > 0.0) {
            return invalid("alpha must be nonnegative and lambda_gram positive");
        }
        let n = graph.n();
        let lap = laplacians(graph);
        Ok(Self {
            solver: JointSolver::new(n, d, &lap.combinatorial, params.alpha, params.lambda_gram)?,
            theta: DMatrix::zeros(n, d),
            params,
            n,
            d,
            t: 0,
            gate: Gate::default(),
        })
    }

    pub fn solver(&self) -> &JointSolver {
        &self.solver
    }
}

impl Policy for GobLin {
    fn name(&self) -> &str {
        "goblin"
    }

    fn select(&mut self, user: usize, arms: &DMatrix<f64>) -> Result<Selection> {
        self.gate.open(user, self.n, arms, self.d)?;
        let block = match self.solver.inv_block(user) {
            Ok(b) => b,
            Err(e) => {
                self.gate.abort();
                return Err(e);
            }
        };
        let t = (self.t + 1) as f64;
        let beta = self.params.lambda_explore * (t + 1.0).ln().sqrt();
        let theta_i = self.theta.row(user).transpose();
        Ok(pick(ucb_indices(arms, &theta_i, beta, &block), beta, None))
    }

    fn observe(&mut self, user: usize, x: &DVector<f64>, y: f64) -> Result<()> {
        self.gate.close(user)?;
        self.t += 1;
        self.solver.add(user, x, y)?;
        self.theta = self.solver.solve()?;
        Ok(())
    }

    fn theta_hat(&self) -> DMatrix<f64> {
        self.theta.clone()
    }
}
