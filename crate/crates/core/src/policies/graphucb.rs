use nalgebra::{DMatrix, DVector};

use super::{pick, ucb_indices, Gate, GraphView, Policy, Selection};
use crate::error::{invalid, Result};
use crate::estimator::{
    beta_width, delta_hat, estimate_local_cached, spd_inverse, user_precision, ConfidenceParams, EstimatorState,
    JointSolver,
};
use crate::graph::{laplacians, Graph, LaplacianSet};

#[derive(Debug, Clone, PartialEq)]
pub struct GraphUcbParams {
    pub alpha: f64,
    pub delta: f64,
    pub sigma: f64,
    pub lambda_gram: f64,
    /// Ridge added to each block of the joint system; `None` means `lambda_gram`.
    pub joint_ridge: Option<f64>,
}

impl Default for GraphUcbParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            delta: 0.01,
            sigma: 0.01,
            lambda_gram: 0.01,
            joint_ridge: None,
        }
    }
}

impl GraphUcbParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return invalid(format!("alpha = {} must be positive", self.alpha));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return invalid(format!("delta = {} must lie in (0,1]", self.delta));
        }
        if !(self.sigma >= 0.0) {
            return invalid(format!("sigma = {} must be nonnegative", self.sigma));
        }
        if !(self.lambda_gram > 0.0) {
            return invalid(format!("lambda_gram = {} must be positive", self.lambda_gram));
        }
        if let Some(r) = self.joint_ridge {
            if !(r >= 0.0) {
                return invalid(format!("joint_ridge = {r} must be nonnegative"));
            }
        }
        Ok(())
    }
}

/// How the estimate is refreshed after each observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateRule {
    /// Exact joint solve over all users.
    Joint,
    /// First-order local update of the served user only.
    Local,
}

/// GraphUCB (joint update) and GraphUCB-Local (local update).
pub struct GraphUcb {
    name: String,
    params: GraphUcbParams,
    rule: UpdateRule,
    lap: LaplacianSet,
    stats: EstimatorState,
    theta: DMatrix<f64>,
    solver: Option<JointSolver>,
    ridges: Vec<DVector<f64>>,
    gate: Gate,
}

impl GraphUcb {
    pub fn new(graph: &Graph, d: usize, params: GraphUcbParams, rule: UpdateRule) -> Result<Self> {
        params.validate()?;
        let n = graph.n();
        let lap = laplacians(graph);
        let solver = match rule {
            UpdateRule::Joint => Some(JointSolver::new(
                n,
                d,
                &lap.random_walk,
                params.alpha,
                params.joint_ridge.unwrap_or(params.lambda_gram),
            )?),
            UpdateRule::Local => None,
        };
        Ok(Self {
            name: match rule {
                UpdateRule::Joint => "graphucb".into(),
                UpdateRule::Local => "graphucb-local".into(),
            },
            stats: EstimatorState::new(n, d, params.lambda_gram)?,
            theta: DMatrix::zeros(n, d),
            ridges: vec![DVector::zeros(d); n],
            params,
            rule,
            lap,
            solver,
            gate: Gate::default(),
        })
    }

    pub fn stats(&self) -> &EstimatorState {
        &self.stats
    }

    pub fn laplacian(&self) -> &LaplacianSet {
        &self.lap
    }

    pub fn rule(&self) -> UpdateRule {
        self.rule
    }
}

impl Policy for GraphUcb {
    fn name(&self) -> &str {
        &self.name
    }

    fn select(&mut self, user: usize, arms: &DMatrix<f64>) -> Result<Selection> {
        self.gate.open(user, self.stats.n(), arms, self.stats.d())?;
        let res = (|| {
            let prec = user_precision(user, &self.stats.users, &self.lap, self.params.alpha);
            let params = ConfidenceParams {
                alpha: self.params.alpha,
                delta: self.params.delta,
                sigma: self.params.sigma,
                delta_vec: delta_hat(user, &self.theta, &self.lap),
            };
            let beta = beta_width(&prec.v_i, &params)?;
            let lambda_inv = spd_inverse(&prec.lambda_i)?;
            let theta_i = self.theta.row(user).transpose();
            let ucb = ucb_indices(arms, &theta_i, beta, &lambda_inv);
            Ok(pick(ucb, beta, Some(prec)))
        })();
        if res.is_err() {
            self.gate.abort();
        }
        res
    }

    fn observe(&mut self, user: usize, x: &DVector<f64>, y: f64) -> Result<()> {
        self.gate.close(user)?;
        self.stats.update(user, x, y)?;
        match self.rule {
            UpdateRule::Joint => {
                let solver = self.solver.as_mut().expect("joint rule owns a solver");
                solver.add(user, x, y)?;
                self.theta = solver.solve()?;
            }
            UpdateRule::Local => {
                self.ridges[user] = self.stats.users[user].ridge();
                let row = estimate_local_cached(user, &self.stats.users, &self.ridges, &self.lap, self.params.alpha);
                self.theta.set_row(user, &row.transpose());
            }
        }
        Ok(())
    }

    fn theta_hat(&self) -> DMatrix<f64> {
        self.theta.clone()
    }

    fn graph_view(&self) -> Option<GraphView<'_>> {
        Some(GraphView {
            stats: &self.stats.users,
            lap: &self.lap,
            alpha: self.params.alpha,
            joint_ridge: self.params.joint_ridge.unwrap_or(self.params.lambda_gram),
            theta_hat: &self.theta,
        })
    }
}
