use nalgebra::{DMatrix, DVector};

use super::{pick, ucb_indices, Gate, Policy, Selection};
use crate::error::{invalid, Result};
use crate::estimator::{beta_width, spd_inverse, ConfidenceParams, EstimatorState};
use crate::graph::Graph;

#[derive(Debug, Clone, PartialEq)]
pub struct ClubParams {
    /// Edge deletion scale; `0` deletes any edge between unequal estimates,
    /// `+inf` never deletes.
    pub alpha2: f64,
    pub alpha: f64,
    pub delta: f64,
    pub sigma: f64,
}

impl Default for ClubParams {
    fn default() -> Self {
        Self {
            alpha2: 1.0,
            alpha: 1.0,
            delta: 0.01,
            sigma: 0.01,
        }
    }
}

/// Confidence radius used for edge deletion.
pub fn club_radius(count: usize) -> f64 {
    let c = count as f64;
    ((1.0 + (1.0 + c).ln()) / (1.0 + c)).sqrt()
}

/// CLUB: users start clustered by the connected components of the user graph;
/// edges between users whose estimates drift apart are deleted and each
/// cluster acts as a single LinUCB model.
pub struct Club {
    params: ClubParams,
    adjacency: Vec<Vec<bool>>,
    labels: Vec<usize>,
    stats: EstimatorState,
    gate: Gate,
}

impl Club {
    pub fn new(graph: &Graph, d: usize, params: ClubParams) -> Result<Self> {
        if !(params.alpha2 >= 0.0) {
            return invalid(format!("alpha2 = {} must be nonnegative", params.alpha2));
        }
        let n = graph.n();
        let adjacency = (0..n).map(|i| (0..n).map(|j| graph.weight(i, j) != 0.0).collect()).collect();
        Ok(Self {
            stats: EstimatorState::new(n, d, params.alpha)?,
            labels: graph.components(),
            adjacency,
            params,
            gate: Gate::default(),
        })
    }

    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adjacency[i][j]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    fn relabel(&mut self) {
        let n = self.adjacency.len();
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                if self.adjacency[i][j] {
                    w[(i, j)] = 1.0;
                }
            }
        }
        self.labels = Graph::from_weights(w).expect("adjacency stays symmetric").components();
    }

    /// Pooled model of user `i`'s cluster: `(αI + Σ xxᵀ, Σ y x)`.
    fn cluster_model(&self, i: usize) -> (DMatrix<f64>, DVector<f64>) {
        let d = self.stats.d();
        let mut a = DMatrix::identity(d, d) * self.params.alpha;
        let mut b = DVector::zeros(d);
        for (j, u) in self.stats.users.iter().enumerate() {
            if self.labels[j] == self.labels[i] {
                a += u.raw_gram();
                b += u.b_vec();
            }
        }
        (a, b)
    }
}

impl Policy for Club {
    fn name(&self) -> &str {
        "club"
    }

    fn select(&mut self, user: usize, arms: &DMatrix<f64>) -> Result<Selection> {
        self.gate.open(user, self.stats.n(), arms, self.stats.d())?;
        let res = (|| {
            let (a, b) = self.cluster_model(user);
            let a_inv = spd_inverse(&a)?;
            let theta = &a_inv * b;
            let params = ConfidenceParams {
                alpha: self.params.alpha,
                delta: self.params.delta,
                sigma: self.params.sigma,
                delta_vec: theta.clone(),
            };
            let beta = beta_width(&a, &params)?;
            Ok(pick(ucb_indices(arms, &theta, beta, &a_inv), beta, None))
        })();
        if res.is_err() {
            self.gate.abort();
        }
        res
    }

    fn observe(&mut self, user: usize, x: &DVector<f64>, y: f64) -> Result<()> {
        self.gate.close(user)?;
        self.stats.update(user, x, y)?;
        let wi = self.stats.users[user].ridge();
        let cb_i = club_radius(self.stats.users[user].count());
        let mut changed = false;
        for j in 0..self.stats.n() {
            if !self.adjacency[user][j] {
                continue;
            }
            let uj = &self.stats.users[j];
            let gap = (&wi - uj.ridge()).norm();
            if gap > self.params.alpha2 * (cb_i + club_radius(uj.count())) {
                self.adjacency[user][j] = false;
                self.adjacency[j][user] = false;
                changed = true;
            }
        }
        if changed {
            self.relabel();
        }
        Ok(())
    }

    fn theta_hat(&self) -> DMatrix<f64> {
        self.stats.ridge_all()
    }
}
