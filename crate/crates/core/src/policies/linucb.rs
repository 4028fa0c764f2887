use nalgebra::{DMatrix, DVector};

use super::{pick, ucb_indices, Gate, Policy, Selection};
use crate::error::{invalid, Result};
use crate::estimator::{beta_width, ConfidenceParams, EstimatorState};

#[derive(Debug, Clone, PartialEq)]
pub struct LinUcbParams {
    /// Ridge weight; `A_i = αI + Σ x xᵀ`.
    pub alpha: f64,
    pub delta: f64,
    pub sigma: f64,
}

impl Default for LinUcbParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            delta: 0.01,
            sigma: 0.01,
        }
    }
}

/// Disjoint LinUCB: one ridge model per user, no sharing.
///
/// The width is the graph-free specialisation of the GraphUCB width, with
/// `θ̂_i` in place of `Δ̂_i`.
pub struct LinUcb {
    params: LinUcbParams,
    stats: EstimatorState,
    gate: Gate,
}

impl LinUcb {
    pub fn new(n: usize, d: usize, params: LinUcbParams) -> Result<Self> {
        if !(params.delta > 0.0 && params.delta <= 1.0) {
            return invalid(format!("delta = {} must lie in (0,1]", params.delta));
        }
        Ok(Self {
            stats: EstimatorState::new(n, d, params.alpha)?,
            params,
            gate: Gate::default(),
        })
    }

    pub fn stats(&self) -> &EstimatorState {
        &self.stats
    }
}

impl Policy for LinUcb {
    fn name(&self) -> &str {
        "linucb"
    }

    fn select(&mut self, user: usize, arms: &DMatrix<f64>) -> Result<Selection> {
        self.gate.open(user, self.stats.n(), arms, self.stats.d())?;
        let u = &self.stats.users[user];
        let theta = u.ridge();
        let params = ConfidenceParams {
            alpha: self.params.alpha,
            delta: self.params.delta,
            sigma: self.params.sigma,
            delta_vec: theta.clone(),
        };
        match beta_width(u.gram(), &params) {
            Ok(beta) => Ok(pick(ucb_indices(arms, &theta, beta, u.gram_inv()), beta, None)),
            Err(e) => {
                self.gate.abort();
                Err(e)
            }
        }
    }

    fn observe(&mut self, user: usize, x: &DVector<f64>, y: f64) -> Result<()> {
        self.gate.close(user)?;
        self.stats.update(user, x, y)
    }

    fn theta_hat(&self) -> DMatrix<f64> {
        self.stats.ridge_all()
    }
}
