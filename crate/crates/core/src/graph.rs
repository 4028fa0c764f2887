//! User graphs: random-graph generators, the three Laplacian variants and the
//! smoothness / sparsity metrics used by the sweeps.
//!
//! Weights live in a dense symmetric matrix. Desk-scale graphs have at most a
//! few thousand nodes, so dense storage keeps every downstream solve simple.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Weighted undirected graph with zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    n: usize,
    weights: DMatrix<f64>,
    degrees: DVector<f64>,
}

impl Graph {
    /// Validates `weights` (square, symmetric, nonnegative, zero diagonal).
    pub fn from_weights(weights: DMatrix<f64>) -> Result<Self> {
        let n = weights.nrows();
        if weights.ncols() != n {
            return Err(Error::DimensionMismatch {
                expected: format!("{n}x{n}"),
                got: format!("{}x{}", n, weights.ncols()),
            });
        }
        for i in 0..n {
            if weights[(i, i)] != 0.0 {
                return invalid(format!("nonzero diagonal weight at node {i}"));
            }
            for j in 0..n {
                let w = weights[(i, j)];
                if !w.is_finite() || w < 0.0 {
                    return invalid(format!("weight ({i},{j}) = {w} is not a finite nonnegative number"));
                }
                if w != weights[(j, i)] {
                    return invalid(format!("weights not symmetric at ({i},{j})"));
                }
            }
        }
        let degrees = DVector::from_iterator(n, weights.row_iter().map(|r| r.sum()));
        Ok(Self { n, weights, degrees })
    }

    pub fn empty(n: usize) -> Self {
        Self {
            n,
            weights: DMatrix::zeros(n, n),
            degrees: DVector::zeros(n),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn weights(&self) -> &DMatrix<f64> {
        &self.weights
    }

    pub fn degrees(&self) -> &DVector<f64> {
        &self.degrees
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.weights[(i, j)]
    }

    /// Undirected edges `(i, j, w)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.n {
            for j in (i + 1)..self.n {
                let w = self.weights[(i, j)];
                if w != 0.0 {
                    out.push((i, j, w));
                }
            }
        }
        out
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.n).filter(move |&j| self.weights[(i, j)] != 0.0)
    }

    /// Connected component label per node, labels numbered by first appearance.
    pub fn components(&self) -> Vec<usize> {
        let mut label = vec![usize::MAX; self.n];
        let mut next = 0;
        for start in 0..self.n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = next;
            while let Some(u) = stack.pop() {
                for v in self.neighbors(u) {
                    if label[v] == usize::MAX {
                        label[v] = next;
                        stack.push(v);
                    }
                }
            }
            next += 1;
        }
        label
    }

    pub fn is_connected(&self) -> bool {
        self.components().iter().all(|&c| c == 0)
    }

    pub fn to_json(&self) -> GraphJson {
        GraphJson {
            n: self.n,
            edges: self.edges(),
        }
    }

    pub fn from_json(doc: &GraphJson) -> Result<Self> {
        let mut w = DMatrix::zeros(doc.n, doc.n);
        for &(i, j, wt) in &doc.edges {
            if i >= j || j >= doc.n {
                return invalid(format!("edge ({i},{j}) must satisfy i < j < n = {}", doc.n));
            }
            if !(wt.is_finite() && wt > 0.0) {
                return invalid(format!("edge ({i},{j}) has weight {wt}"));
            }
            if w[(i, j)] != 0.0 {
                return invalid(format!("edge ({i},{j}) listed twice"));
            }
            w[(i, j)] = wt;
            w[(j, i)] = wt;
        }
        Self::from_weights(w)
    }
}

/// Serialized graph: each undirected edge stored once with `i < j`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphJson {
    pub n: usize,
    pub edges: Vec<(usize, usize, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphModel {
    Rbf,
    Er,
    Ba,
    Ws,
}

/// Parameters for every supported generator; only the fields of `model` are used.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphGenConfig {
    pub model: GraphModel,
    pub rbf_rho: f64,
    pub sparsity_threshold: f64,
    pub er_p: f64,
    pub ba_m: usize,
    pub ws_m: usize,
    pub ws_p: f64,
}

impl Default for GraphGenConfig {
    fn default() -> Self {
        Self {
            model: GraphModel::Rbf,
            rbf_rho: 0.1,
            sparsity_threshold: 0.5,
            er_p: 0.4,
            ba_m: 5,
            ws_m: 6,
            ws_p: 0.2,
        }
    }
}

impl GraphGenConfig {
    pub fn validate(&self, n: usize) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                invalid(format!("{name} = {v} must lie in [0,1]"))
            }
        };
        match self.model {
            GraphModel::Rbf => {
                if !(self.rbf_rho > 0.0 && self.rbf_rho.is_finite()) {
                    return invalid(format!("rbf_rho = {} must be positive", self.rbf_rho));
                }
                unit("sparsity_threshold", self.sparsity_threshold)
            }
            GraphModel::Er => unit("er_p", self.er_p),
            GraphModel::Ba => {
                if self.ba_m < 1 || self.ba_m >= n {
                    return invalid(format!("ba_m = {} must satisfy 1 <= m < n = {n}", self.ba_m));
                }
                Ok(())
            }
            GraphModel::Ws => {
                check_ws(n, self.ws_m)?;
                unit("ws_p", self.ws_p)
            }
        }
    }

    /// Builds the configured graph on `n` nodes. RBF needs `features` (n rows).
    pub fn build(&self, n: usize, features: Option<&DMatrix<f64>>, seed: u64) -> Result<Graph> {
        self.validate(n)?;
        match self.model {
            GraphModel::Rbf => {
                let f = features.ok_or_else(|| Error::InvalidInput("RBF graph needs features".into()))?;
                build_rbf_graph(f, self.rbf_rho, self.sparsity_threshold)
            }
            GraphModel::Er => build_er_graph(n, self.er_p, seed),
            GraphModel::Ba => build_ba_graph(n, self.ba_m, seed),
            GraphModel::Ws => build_ws_graph(n, self.ws_m, self.ws_p, seed),
        }
    }
}

fn check_ws(n: usize, m: usize) -> Result<()> {
    if !m.is_multiple_of(2) {
        return invalid(format!("ws_m = {m} must be even"));
    }
    if m >= n {
        return invalid(format!("ws_m = {m} must be below n = {n}"));
    }
    Ok(())
}

/// `W_ij = exp(-rho * |f_i - f_j|^2)`, with weights strictly below `threshold` removed.
pub fn build_rbf_graph(features: &DMatrix<f64>, rho: f64, threshold: f64) -> Result<Graph> {
    let n = features.nrows();
    if n == 0 {
        return invalid("RBF graph needs at least one row");
    }
    if !(rho > 0.0 && rho.is_finite()) {
        return invalid(format!("rho = {rho} must be positive"));
    }
    if !(0.0..=1.0).contains(&threshold) {
        return invalid(format!("threshold = {threshold} must lie in [0,1]"));
    }
    if features.iter().any(|v| !v.is_finite()) {
        return invalid("features contain non-finite entries");
    }
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let dist2 = (features.row(i) - features.row(j)).norm_squared();
            let k = (-rho * dist2).exp();
            if k >= threshold {
                w[(i, j)] = k;
                w[(j, i)] = k;
            }
        }
    }
    Graph::from_weights(w)
}

/// Erdős–Rényi graph: every unordered pair gets an edge of weight 1 with probability `p`.
pub fn build_er_graph(n: usize, p: f64, seed: u64) -> Result<Graph> {
    if !(0.0..=1.0).contains(&p) {
        return invalid(format!("p = {p} must lie in [0,1]"));
    }
    let mut rng = crate::stream_rng(seed, crate::STREAM_GRAPH);
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            if rng.random::<f64>() < p {
                w[(i, j)] = 1.0;
                w[(j, i)] = 1.0;
            }
        }
    }
    Graph::from_weights(w)
}

/// Barabási–Albert preferential attachment, seeded from a complete graph on `m + 1` nodes.
pub fn build_ba_graph(n: usize, m: usize, seed: u64) -> Result<Graph> {
    if m < 1 || m >= n {
        return invalid(format!("m = {m} must satisfy 1 <= m < n = {n}"));
    }
    let mut rng = crate::stream_rng(seed, crate::STREAM_GRAPH);
    let mut w = DMatrix::zeros(n, n);
    // every edge endpoint appears once per incident edge, so uniform draws
    // from this list are degree-proportional
    let mut endpoints: Vec<usize> = Vec::new();
    for i in 0..=m {
        for j in (i + 1)..=m {
            w[(i, j)] = 1.0;
            w[(j, i)] = 1.0;
            endpoints.push(i);
            endpoints.push(j);
        }
    }
    for v in (m + 1)..n {
        let mut targets: Vec<usize> = Vec::with_capacity(m);
        while targets.len() < m {
            let u = endpoints[rng.random_range(0..endpoints.len())];
            if !targets.contains(&u) {
                targets.push(u);
            }
        }
        for &u in &targets {
            w[(u, v)] = 1.0;
            w[(v, u)] = 1.0;
            endpoints.push(u);
            endpoints.push(v);
        }
    }
    Graph::from_weights(w)
}

/// Watts–Strogatz small world: ring lattice of even degree `m`, each lattice
/// edge rewired with probability `p` to a uniformly chosen non-neighbor.
pub fn build_ws_graph(n: usize, m: usize, p: f64, seed: u64) -> Result<Graph> {
    check_ws(n, m)?;
    if !(0.0..=1.0).contains(&p) {
        return invalid(format!("p = {p} must lie in [0,1]"));
    }
    let mut rng = crate::stream_rng(seed, crate::STREAM_GRAPH);
    let mut w = DMatrix::zeros(n, n);
    for i in 0..n {
        for k in 1..=(m / 2) {
            let j = (i + k) % n;
            w[(i, j)] = 1.0;
            w[(j, i)] = 1.0;
        }
    }
    for k in 1..=(m / 2) {
        for i in 0..n {
            if rng.random::<f64>() >= p {
                continue;
            }
            let j = (i + k) % n;
            if w[(i, j)] == 0.0 {
                continue;
            }
            let mut free: Vec<usize> = (0..n).filter(|&u| u != i && w[(i, u)] == 0.0).collect();
            if free.is_empty() {
                continue;
            }
            free.shuffle(&mut rng);
            let u = free[0];
            w[(i, j)] = 0.0;
            w[(j, i)] = 0.0;
            w[(i, u)] = 1.0;
            w[(u, i)] = 1.0;
        }
    }
    Graph::from_weights(w)
}

/// The combinatorial, symmetric normalized and random-walk Laplacians.
#[derive(Debug, Clone, PartialEq)]
pub struct LaplacianSet {
    pub combinatorial: DMatrix<f64>,
    pub sym_normalized: DMatrix<f64>,
    pub random_walk: DMatrix<f64>,
    pub isolated: Vec<bool>,
}

impl LaplacianSet {
    pub fn n(&self) -> usize {
        self.random_walk.nrows()
    }

    /// `(L + Lᵀ)/2` of the random-walk Laplacian.
    pub fn random_walk_symmetric(&self) -> DMatrix<f64> {
        (&self.random_walk + self.random_walk.transpose()) * 0.5
    }
}

/// Computes all three Laplacians. Isolated nodes get a unit diagonal in the
/// normalized variants and a zero row in `L = D - W`.
pub fn laplacians(g: &Graph) -> LaplacianSet {
    let n = g.n();
    let d = g.degrees();
    let isolated: Vec<bool> = d.iter().map(|&x| x == 0.0).collect();
    let combinatorial = DMatrix::from_diagonal(d) - g.weights();
    let mut sym = DMatrix::zeros(n, n);
    let mut rw = DMatrix::zeros(n, n);
    for i in 0..n {
        if isolated[i] {
            sym[(i, i)] = 1.0;
            rw[(i, i)] = 1.0;
            continue;
        }
        for j in 0..n {
            let l = combinatorial[(i, j)];
            if l == 0.0 {
                continue;
            }
            rw[(i, j)] = l / d[i];
            if !isolated[j] {
                sym[(i, j)] = l / (d[i] * d[j]).sqrt();
            }
        }
    }
    LaplacianSet {
        combinatorial,
        sym_normalized: sym,
        random_walk: rw,
        isolated,
    }
}

fn check_theta(theta: &DMatrix<f64>, n: usize) -> Result<()> {
    if theta.nrows() != n {
        return Err(Error::DimensionMismatch {
            expected: format!("{n} rows"),
            got: format!("{} rows", theta.nrows()),
        });
    }
    Ok(())
}

/// `tr(Θᵀ 𝓛 Θ)` with the random-walk Laplacian.
pub fn smoothness(theta: &DMatrix<f64>, lap: &LaplacianSet) -> Result<f64> {
    check_theta(theta, lap.n())?;
    Ok((theta.transpose() * &lap.random_walk * theta).trace())
}

/// The pairwise-sum form `1/4 Σ_k Σ_{i,j} (W_ij/D_ii + W_ji/D_jj)(Θ_ik - Θ_jk)²`,
/// summed over ordered pairs. It agrees with [`smoothness`] only when every
/// node's neighbors carry equal normalized weight back to it (e.g. regular graphs).
pub fn smoothness_pairwise(theta: &DMatrix<f64>, g: &Graph) -> Result<f64> {
    check_theta(theta, g.n())?;
    let d = g.degrees();
    let mut total = 0.0;
    for i in 0..g.n() {
        for j in 0..g.n() {
            let w = g.weight(i, j);
            if w == 0.0 {
                continue;
            }
            let coef = w / d[i] + w / d[j];
            let diff2 = (theta.row(i) - theta.row(j)).norm_squared();
            total += coef * diff2;
        }
    }
    Ok(0.25 * total)
}

/// Fraction of ordered off-diagonal pairs carrying an edge.
pub fn sparsity_measure(g: &Graph) -> Result<f64> {
    let n = g.n();
    if n < 2 {
        return invalid("sparsity needs at least two nodes");
    }
    Ok((2 * g.edge_count()) as f64 / (n * (n - 1)) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn path(n: usize) -> Graph {
        let mut w = DMatrix::zeros(n, n);
        for i in 0..n - 1 {
            w[(i, i + 1)] = 1.0;
            w[(i + 1, i)] = 1.0;
        }
        Graph::from_weights(w).unwrap()
    }

    #[test]
    fn rbf_identical_rows() {
        let f = DMatrix::from_row_slice(2, 2, &[0.3, -1.0, 0.3, -1.0]);
        let g = build_rbf_graph(&f, 1.0, 0.0).unwrap();
        assert_eq!(g.weights(), &DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0]));
    }

    #[test]
    fn rbf_full_threshold_empties() {
        let f = DMatrix::from_row_slice(3, 1, &[0.0, 1.0, 2.0]);
        let g = build_rbf_graph(&f, 1.0, 1.0).unwrap();
        assert_eq!(g.edge_count(), 0);
    }

    #[test]
    fn rbf_keeps_weights_equal_to_threshold() {
        let f = DMatrix::from_row_slice(2, 1, &[0.0, 1.0]);
        let s = (-1.0f64).exp();
        assert_eq!(build_rbf_graph(&f, 1.0, s).unwrap().edge_count(), 1);
    }

    #[test]
    fn rbf_rejects_nan() {
        let f = DMatrix::from_row_slice(2, 1, &[0.0, f64::NAN]);
        assert!(matches!(build_rbf_graph(&f, 1.0, 0.0), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn er_extremes() {
        assert_eq!(build_er_graph(10, 0.0, 1).unwrap().edge_count(), 0);
        assert_eq!(build_er_graph(10, 1.0, 1).unwrap().edge_count(), 45);
    }

    #[test]
    fn ba_core_and_edge_count() {
        let g = build_ba_graph(4, 3, 0).unwrap();
        assert_eq!(g.edge_count(), 6);
        let g = build_ba_graph(30, 3, 5).unwrap();
        assert_eq!(g.edge_count(), 6 + (30 - 4) * 3);
        assert!(g.is_connected());
        assert!(build_ba_graph(3, 3, 0).is_err());
    }

    #[test]
    fn ws_lattice() {
        let g = build_ws_graph(6, 2, 0.0, 0).unwrap();
        assert!(g.degrees().iter().all(|&d| d == 2.0));
        assert!(g.is_connected());
        assert!(build_ws_graph(10, 3, 0.1, 0).is_err());
    }

    #[test]
    fn laplacian_two_nodes() {
        let g = Graph::from_weights(DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 1.0, 0.0])).unwrap();
        let l = laplacians(&g);
        let want = DMatrix::from_row_slice(2, 2, &[1.0, -1.0, -1.0, 1.0]);
        assert_eq!(l.random_walk, want);
        assert_eq!(l.combinatorial, want);
        assert_relative_eq!(l.sym_normalized, want, epsilon = 1e-15);
    }

    #[test]
    fn laplacian_path_middle_row() {
        let l = laplacians(&path(3));
        assert_eq!(l.random_walk.row(1).iter().copied().collect::<Vec<_>>(), vec![-0.5, 1.0, -0.5]);
    }

    #[test]
    fn laplacian_isolated_node() {
        let mut w = DMatrix::zeros(3, 3);
        w[(0, 1)] = 2.0;
        w[(1, 0)] = 2.0;
        let l = laplacians(&Graph::from_weights(w).unwrap());
        assert!(l.isolated[2]);
        assert_eq!(l.random_walk.row(2).iter().copied().collect::<Vec<_>>(), vec![0.0, 0.0, 1.0]);
        assert_eq!(l.sym_normalized[(2, 2)], 1.0);
        assert_eq!(l.combinatorial.row(2).sum(), 0.0);
        assert_eq!(l.combinatorial[(2, 2)], 0.0);
    }

    #[test]
    fn smoothness_constant_and_empty() {
        let g = path(4);
        let l = laplacians(&g);
        let theta = DMatrix::from_fn(4, 3, |_, k| k as f64 + 0.5);
        assert!(smoothness(&theta, &l).unwrap().abs() < 1e-14);
        let e = laplacians(&Graph::empty(4));
        let theta = DMatrix::from_fn(4, 2, |i, k| (i * 2 + k) as f64 - 3.0);
        assert_relative_eq!(smoothness(&theta, &e).unwrap(), theta.norm_squared(), max_relative = 1e-14);
    }

    #[test]
    fn pairwise_form_gap_on_path() {
        // 3-node path, Θ = e_1: trace form 1, pairwise form 3/4
        let g = path(3);
        let theta = DMatrix::from_column_slice(3, 1, &[1.0, 0.0, 0.0]);
        let l = laplacians(&g);
        assert_relative_eq!(smoothness(&theta, &l).unwrap(), 1.0, max_relative = 1e-14);
        assert_relative_eq!(smoothness_pairwise(&theta, &g).unwrap(), 0.75, max_relative = 1e-14);
    }

    #[test]
    fn sparsity_values() {
        assert_eq!(sparsity_measure(&path(4)).unwrap(), 0.5);
        assert_eq!(sparsity_measure(&build_er_graph(5, 1.0, 0).unwrap()).unwrap(), 1.0);
        assert_eq!(sparsity_measure(&Graph::empty(5)).unwrap(), 0.0);
        assert!(sparsity_measure(&Graph::empty(1)).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let g = build_er_graph(12, 0.3, 9).unwrap();
        let s = serde_json::to_string(&g.to_json()).unwrap();
        let back = Graph::from_json(&serde_json::from_str(&s).unwrap()).unwrap();
        assert_eq!(back, g);
        let bad = GraphJson { n: 3, edges: vec![(2, 1, 1.0)] };
        assert!(Graph::from_json(&bad).is_err());
    }

    #[test]
    fn from_weights_rejects_asymmetry() {
        let w = DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.5, 0.0]);
        assert!(Graph::from_weights(w).is_err());
    }
}
