//! Ground-truth user feature matrices that are smooth on a graph.
//!
//! A random Θ₀ is pulled toward the graph by minimising
//! `‖Θ − Θ₀‖_F² + γ tr(Θᵀ𝓛Θ)`, then rescaled so the population matches the
//! norm conventions used by the sweeps.

use nalgebra::{Cholesky, DMatrix};
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::LaplacianSet;

/// Which matrix norm is pinned to `n` during normalization.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormKind {
    #[default]
    Spectral,
    Frobenius,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserPopulation {
    pub theta: DMatrix<f64>,
    pub gen_gamma: f64,
    pub source_theta0: DMatrix<f64>,
    /// Factor applied to reach norm `n`.
    pub norm_scale: f64,
    /// Extra factor applied so every row has unit norm or less (1.0 if unused).
    pub row_cap_scale: f64,
    /// Whether `I + γ·sym(𝓛)` was positive definite, i.e. the smoothing
    /// objective had a unique minimizer rather than just a stationary point.
    pub convex: bool,
}

impl UserPopulation {
    /// Θ₀ → smooth solve → norm scaling → row cap.
    pub fn generate(theta0: DMatrix<f64>, lap: &LaplacianSet, gamma: f64, norm: NormKind) -> Result<Self> {
        let convex = smoothing_is_convex(lap, gamma);
        let smooth = generate_smooth(&theta0, lap, gamma)?;
        let (theta, norm_scale, row_cap_scale) = normalize_population_with(&smooth, norm)?;
        Ok(Self {
            theta,
            gen_gamma: gamma,
            source_theta0: theta0,
            norm_scale,
            row_cap_scale,
            convex,
        })
    }

    pub fn n(&self) -> usize {
        self.theta.nrows()
    }

    pub fn d(&self) -> usize {
        self.theta.ncols()
    }

    pub fn to_json(&self) -> PopulationJson {
        PopulationJson {
            n: self.n(),
            d: self.d(),
            gamma: self.gen_gamma,
            theta: row_major(&self.theta),
        }
    }

    /// Rebuilds a population from its JSON form. Θ₀ is not stored, so it is set to Θ.
    pub fn from_json(doc: &PopulationJson) -> Result<Self> {
        if doc.theta.len() != doc.n * doc.d {
            return Err(Error::DimensionMismatch {
                expected: format!("{} entries", doc.n * doc.d),
                got: format!("{} entries", doc.theta.len()),
            });
        }
        if doc.theta.iter().any(|v| !v.is_finite()) {
            return invalid("population contains non-finite entries");
        }
        let theta = DMatrix::from_row_slice(doc.n, doc.d, &doc.theta);
        Ok(Self {
            source_theta0: theta.clone(),
            theta,
            gen_gamma: doc.gamma,
            norm_scale: 1.0,
            row_cap_scale: 1.0,
            convex: true,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationJson {
    pub n: usize,
    pub d: usize,
    pub gamma: f64,
    pub theta: Vec<f64>,
}

pub(crate) fn row_major(m: &DMatrix<f64>) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

/// I.i.d. standard normal `n×d` matrix.
pub fn random_theta0(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = crate::stream_rng(seed, crate::STREAM_THETA);
    // fill row by row so a given row does not depend on n
    let data: Vec<f64> = (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect();
    DMatrix::from_row_slice(n, d, &data)
}

fn smoothing_system(lap: &LaplacianSet, gamma: f64) -> DMatrix<f64> {
    let n = lap.n();
    DMatrix::identity(n, n) + lap.random_walk_symmetric() * gamma
}

/// True when `I + γ·sym(𝓛)` is positive definite.
pub fn smoothing_is_convex(lap: &LaplacianSet, gamma: f64) -> bool {
    Cholesky::new(smoothing_system(lap, gamma)).is_some()
}

/// Stationary point of `‖Θ − Θ₀‖_F² + γ tr(Θᵀ𝓛Θ)`: solves `(I + γ(𝓛+𝓛ᵀ)/2) Θ = Θ₀`.
///
/// The symmetric part of the random-walk Laplacian can have slightly negative
/// eigenvalues on irregular graphs, so for very large γ the system may be
/// indefinite; see [`smoothing_is_convex`].
pub fn generate_smooth(theta0: &DMatrix<f64>, lap: &LaplacianSet, gamma: f64) -> Result<DMatrix<f64>> {
    if !(gamma >= 0.0 && gamma.is_finite()) {
        return invalid(format!("gamma = {gamma} must be finite and nonnegative"));
    }
    if theta0.nrows() != lap.n() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} rows", lap.n()),
            got: format!("{} rows", theta0.nrows()),
        });
    }
    if gamma == 0.0 {
        return Ok(theta0.clone());
    }
    let sys = smoothing_system(lap, gamma);
    if let Some(ch) = Cholesky::new(sys.clone()) {
        return Ok(ch.solve(theta0));
    }
    sys.lu().solve(theta0).ok_or_else(|| Error::Numerical {
        msg: "smoothing system is singular".into(),
        condition: f64::INFINITY,
    })
}

/// The Eq. 16 objective value, used by tests and diagnostics.
pub fn smoothing_objective(theta: &DMatrix<f64>, theta0: &DMatrix<f64>, lap: &LaplacianSet, gamma: f64) -> f64 {
    (theta - theta0).norm_squared() + gamma * (theta.transpose() * &lap.random_walk * theta).trace()
}

pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    m.singular_values().max()
}

/// Scales Θ to spectral norm `n`, then caps row norms at 1.
pub fn normalize_population(theta: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    normalize_population_with(theta, NormKind::Spectral).map(|(t, _, _)| t)
}

/// Returns the normalized matrix with the norm factor and the row-cap factor.
pub fn normalize_population_with(theta: &DMatrix<f64>, kind: NormKind) -> Result<(DMatrix<f64>, f64, f64)> {
    let norm = match kind {
        NormKind::Spectral => spectral_norm(theta),
        NormKind::Frobenius => theta.norm(),
    };
    if norm == 0.0 || !norm.is_finite() {
        return invalid("cannot normalize a zero or non-finite matrix");
    }
    let scale = theta.nrows() as f64 / norm;
    let mut out = theta * scale;
    let max_row = out.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let cap = if max_row > 1.0 { 1.0 / max_row } else { 1.0 };
    if cap != 1.0 {
        out *= cap;
    }
    Ok((out, scale, cap))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{build_rbf_graph, build_ws_graph, laplacians, smoothness, Graph};
    use approx::assert_relative_eq;

    #[test]
    fn theta0_deterministic_and_centered() {
        assert_eq!(random_theta0(1, 1, 3).len(), 1);
        assert_eq!(random_theta0(4, 3, 7), random_theta0(4, 3, 7));
        assert_ne!(random_theta0(4, 3, 7), random_theta0(4, 3, 8));
        let t = random_theta0(1000, 5, 11);
        for c in 0..5 {
            assert!(t.column(c).mean().abs() < 4.0 / 1000f64.sqrt());
        }
    }

    #[test]
    fn gamma_zero_is_identity() {
        let t0 = random_theta0(6, 2, 1);
        let l = laplacians(&build_ws_graph(6, 2, 0.0, 0).unwrap());
        assert_eq!(generate_smooth(&t0, &l, 0.0).unwrap(), t0);
    }

    #[test]
    fn empty_graph_shrinks() {
        let t0 = random_theta0(5, 3, 2);
        let l = laplacians(&Graph::empty(5));
        let out = generate_smooth(&t0, &l, 4.0).unwrap();
        assert_relative_eq!(out, &t0 / 5.0, max_relative = 1e-12);
    }

    #[test]
    fn large_gamma_flattens_regular_graph() {
        let l = laplacians(&build_ws_graph(12, 4, 0.0, 0).unwrap());
        let t0 = random_theta0(12, 3, 4);
        let out = generate_smooth(&t0, &l, 1e6).unwrap();
        assert!(smoothness(&out, &l).unwrap() < 1e-3 * smoothness(&t0, &l).unwrap());
    }

    #[test]
    fn monotone_in_gamma_on_rbf() {
        let t0 = random_theta0(20, 5, 5);
        let l = laplacians(&build_rbf_graph(&t0, 0.1, 0.0).unwrap());
        let sm: Vec<f64> = [0.1, 1.0, 10.0]
            .iter()
            .map(|&g| smoothness(&generate_smooth(&t0, &l, g).unwrap(), &l).unwrap())
            .collect();
        assert!(sm[0] > sm[1] && sm[1] > sm[2], "{sm:?}");
    }

    #[test]
    fn path_graph_is_not_convex_at_large_gamma() {
        let mut w = DMatrix::zeros(3, 3);
        w[(0, 1)] = 1.0;
        w[(1, 0)] = 1.0;
        w[(1, 2)] = 1.0;
        w[(2, 1)] = 1.0;
        let l = laplacians(&Graph::from_weights(w).unwrap());
        assert!(smoothing_is_convex(&l, 1.0));
        assert!(!smoothing_is_convex(&l, 100.0));
    }

    #[test]
    fn normalization_examples() {
        let out = normalize_population(&DMatrix::identity(2, 2)).unwrap();
        // spectral norm 2, rows then capped to unit length
        assert_relative_eq!(out, DMatrix::identity(2, 2), epsilon = 1e-15);
        let (raw, scale, cap) = normalize_population_with(&DMatrix::identity(2, 2), NormKind::Spectral).unwrap();
        assert_eq!((scale, cap), (2.0, 0.5));
        assert_relative_eq!(raw, DMatrix::identity(2, 2), epsilon = 1e-15);
        assert!(normalize_population(&DMatrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn normalized_spectral_norm_is_n_before_cap() {
        let t = random_theta0(20, 5, 9) * 0.01;
        let (out, _, cap) = normalize_population_with(&t, NormKind::Spectral).unwrap();
        assert_relative_eq!(spectral_norm(&out) / cap, 20.0, max_relative = 1e-10);
        assert!(out.row_iter().all(|r| r.norm() <= 1.0 + 1e-12));
        // idempotent: re-normalizing rescales to norm n and the cap undoes it
        let again = normalize_population(&out).unwrap();
        assert_relative_eq!(again, out, max_relative = 1e-10);
    }

    #[test]
    fn json_roundtrip() {
        let t0 = random_theta0(4, 2, 1);
        let l = laplacians(&Graph::empty(4));
        let p = UserPopulation::generate(t0, &l, 1.0, NormKind::Spectral).unwrap();
        let back = UserPopulation::from_json(&p.to_json()).unwrap();
        assert_eq!(back.theta, p.theta);
    }
}
