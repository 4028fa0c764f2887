//! Laplacian-regularized estimation of all user vectors at once.
//!
//! Per-user sufficient statistics `A_i = Σ x xᵀ + λ_gram I` and `B_i = Σ y x`
//! feed three estimators:
//!
//! * the exact joint solution of `(A + α 𝓛⊗I) vec(Θ) = B` (user-blocked layout,
//!   block `i` holds the coordinates of user `i`);
//! * the first-order local estimate
//!   `A_i⁻¹B_i − α A_i⁻¹ Σ_j 𝓛_ij A_j⁻¹B_j`, which costs `O(n d²)`;
//! * the independent ridge estimate `A_i⁻¹B_i`.
//!
//! The precision block `Λ_i = A_i + 2α𝓛_ii I + α² Σ_j 𝓛_ij² A_j⁻¹` and the width
//! `β_i` define the confidence ellipsoid used by the UCB policies.

use nalgebra::{Cholesky, DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::LaplacianSet;

/// Rank-one updates between full re-inversions of a cached inverse.
pub const REFRESH_EVERY: usize = 500;

/// Largest `n·d` for which the joint solver keeps an explicit inverse.
pub const CACHED_JOINT_LIMIT: usize = 512;

/// Norm slack allowed on arm vectors.
const NORM_TOL: f64 = 1e-9;

/// Sufficient statistics for one user.
#[derive(Debug, Clone, PartialEq)]
pub struct UserStats {
    gram: DMatrix<f64>,
    b_vec: DVector<f64>,
    count: usize,
    gram_inv: DMatrix<f64>,
    since_refresh: usize,
    lambda_gram: f64,
}

impl UserStats {
    pub fn new(d: usize, lambda_gram: f64) -> Result<Self> {
        if !(lambda_gram > 0.0 && lambda_gram.is_finite()) {
            return invalid(format!("lambda_gram = {lambda_gram} must be positive"));
        }
        Ok(Self {
            gram: DMatrix::identity(d, d) * lambda_gram,
            b_vec: DVector::zeros(d),
            count: 0,
            gram_inv: DMatrix::identity(d, d) / lambda_gram,
            since_refresh: 0,
            lambda_gram,
        })
    }

    pub fn dim(&self) -> usize {
        self.b_vec.len()
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn gram_inv(&self) -> &DMatrix<f64> {
        &self.gram_inv
    }

    pub fn b_vec(&self) -> &DVector<f64> {
        &self.b_vec
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn lambda_gram(&self) -> f64 {
        self.lambda_gram
    }

    /// `Σ x xᵀ` without the ridge.
    pub fn raw_gram(&self) -> DMatrix<f64> {
        &self.gram - DMatrix::identity(self.dim(), self.dim()) * self.lambda_gram
    }

    /// Independent ridge estimate `A_i⁻¹ B_i`.
    pub fn ridge(&self) -> DVector<f64> {
        &self.gram_inv * &self.b_vec
    }

    /// Adds one observation; the inverse follows by Sherman–Morrison and is
    /// recomputed from scratch every [`REFRESH_EVERY`] updates.
    pub fn update(&mut self, x: &DVector<f64>, y: f64) -> Result<()> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: format!("arm of length {}", self.dim()),
                got: format!("length {}", x.len()),
            });
        }
        let norm = x.norm();
        if !norm.is_finite() || norm > 1.0 + NORM_TOL {
            return invalid(format!("arm norm {norm} exceeds 1"));
        }
        if !y.is_finite() {
            return invalid(format!("payoff {y} is not finite"));
        }
        self.gram.ger(1.0, x, x, 1.0);
        self.b_vec.axpy(y, x, 1.0);
        self.count += 1;
        self.since_refresh += 1;
        if self.since_refresh >= REFRESH_EVERY {
            self.refresh()?;
        } else {
            let ax = &self.gram_inv * x;
            let denom = 1.0 + x.dot(&ax);
            self.gram_inv.ger(-1.0 / denom, &ax, &ax, 1.0);
        }
        Ok(())
    }

    /// Recomputes the cached inverse from the Gram matrix.
    pub fn refresh(&mut self) -> Result<()> {
        self.gram_inv = spd_inverse(&self.gram)?;
        self.since_refresh = 0;
        Ok(())
    }
}

pub(crate) fn spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(m.clone())
        .map(|c| c.inverse())
        .ok_or_else(|| Error::Numerical {
            msg: "matrix is not positive definite".into(),
            condition: f64::INFINITY,
        })
}

/// `log det` of a symmetric positive definite matrix.
pub fn log_det_spd(m: &DMatrix<f64>) -> Result<f64> {
    let c = Cholesky::new(m.clone()).ok_or_else(|| Error::Numerical {
        msg: "matrix is not positive definite".into(),
        condition: f64::INFINITY,
    })?;
    Ok(2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>())
}

/// Statistics of every user plus the shared ridge.
#[derive(Debug, Clone, PartialEq)]
pub struct EstimatorState {
    pub users: Vec<UserStats>,
}

impl EstimatorState {
    pub fn new(n: usize, d: usize, lambda_gram: f64) -> Result<Self> {
        let proto = UserStats::new(d, lambda_gram)?;
        Ok(Self { users: vec![proto; n] })
    }

    pub fn n(&self) -> usize {
        self.users.len()
    }

    pub fn d(&self) -> usize {
        self.users.first().map_or(0, |u| u.dim())
    }

    pub fn update(&mut self, i: usize, x: &DVector<f64>, y: f64) -> Result<()> {
        let n = self.n();
        self.users
            .get_mut(i)
            .ok_or_else(|| Error::InvalidInput(format!("user {i} out of range (n = {n})")))?
            .update(x, y)
    }

    /// Joint view with `joint_ridge · I` added to every raw Gram block.
    pub fn joint_state(&self, joint_ridge: f64) -> JointState {
        let d = self.d();
        JointState {
            d,
            blocks: self
                .users
                .iter()
                .map(|u| u.raw_gram() + DMatrix::identity(d, d) * joint_ridge)
                .collect(),
            b_joint: stack(self.users.iter().map(|u| u.b_vec())),
        }
    }

    /// Row `i` holds user `i`'s independent ridge estimate.
    pub fn ridge_all(&self) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.n(), self.d());
        for (i, u) in self.users.iter().enumerate() {
            out.set_row(i, &u.ridge().transpose());
        }
        out
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            version: SNAPSHOT_VERSION,
            d: self.d(),
            lambda_gram: self.users.first().map_or(0.0, |u| u.lambda_gram),
            users: self
                .users
                .iter()
                .map(|u| UserSnapshot {
                    gram: crate::signals::row_major(&u.gram),
                    b: u.b_vec.as_slice().to_vec(),
                    count: u.count,
                    gram_inv: Some(crate::signals::row_major(&u.gram_inv)),
                    since_refresh: u.since_refresh,
                })
                .collect(),
        }
    }

    /// Restores statistics. Inverse caches are taken from the snapshot when
    /// present (bit-exact continuation), otherwise recomputed.
    pub fn restore(snap: &Snapshot) -> Result<Self> {
        if snap.version != SNAPSHOT_VERSION {
            return invalid(format!("unsupported snapshot version {}", snap.version));
        }
        let d = snap.d;
        let mut users = Vec::with_capacity(snap.users.len());
        for (i, u) in snap.users.iter().enumerate() {
            if u.gram.len() != d * d || u.b.len() != d {
                return invalid(format!("snapshot user {i} has wrong dimensions"));
            }
            let mut s = UserStats::new(d, snap.lambda_gram)?;
            s.gram = DMatrix::from_row_slice(d, d, &u.gram);
            s.b_vec = DVector::from_column_slice(&u.b);
            s.count = u.count;
            match &u.gram_inv {
                Some(inv) if inv.len() == d * d => {
                    s.gram_inv = DMatrix::from_row_slice(d, d, inv);
                    s.since_refresh = u.since_refresh;
                }
                _ => s.refresh()?,
            }
            users.push(s);
        }
        Ok(Self { users })
    }
}

fn stack<'a>(parts: impl Iterator<Item = &'a DVector<f64>>) -> DVector<f64> {
    let v: Vec<f64> = parts.flat_map(|p| p.iter().copied()).collect();
    DVector::from_vec(v)
}

pub const SNAPSHOT_VERSION: u32 = 1;

/// Versioned JSON checkpoint of an [`EstimatorState`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub version: u32,
    pub d: usize,
    pub lambda_gram: f64,
    pub users: Vec<UserSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserSnapshot {
    /// `Σ x xᵀ + λ_gram I`, row-major.
    pub gram: Vec<f64>,
    pub b: Vec<f64>,
    pub count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gram_inv: Option<Vec<f64>>,
    #[serde(default)]
    pub since_refresh: usize,
}

/// Block-diagonal design matrix and stacked response of the joint problem.
#[derive(Debug, Clone, PartialEq)]
pub struct JointState {
    pub d: usize,
    pub blocks: Vec<DMatrix<f64>>,
    pub b_joint: DVector<f64>,
}

impl JointState {
    pub fn n(&self) -> usize {
        self.blocks.len()
    }

    /// Dense `nd × nd` block-diagonal matrix.
    pub fn dense(&self) -> DMatrix<f64> {
        let (n, d) = (self.n(), self.d);
        let mut a = DMatrix::zeros(n * d, n * d);
        for (i, blk) in self.blocks.iter().enumerate() {
            a.view_mut((i * d, i * d), (d, d)).copy_from(blk);
        }
        a
    }
}

/// `M = A + α (𝓛 ⊗ I_d)` in the user-blocked layout.
pub fn joint_matrix(joint: &JointState, lap: &LaplacianSet, alpha: f64) -> DMatrix<f64> {
    let mut m = joint.dense();
    add_kron_identity(&mut m, &lap.random_walk, alpha, joint.d);
    m
}

pub(crate) fn add_kron_identity(m: &mut DMatrix<f64>, l: &DMatrix<f64>, alpha: f64, d: usize) {
    let n = l.nrows();
    for i in 0..n {
        for j in 0..n {
            let v = alpha * l[(i, j)];
            if v != 0.0 {
                for k in 0..d {
                    m[(i * d + k, j * d + k)] += v;
                }
            }
        }
    }
}

/// Reshapes the user-blocked vector into an `n × d` matrix (row `i` = user `i`).
pub fn unstack(v: &DVector<f64>, n: usize, d: usize) -> DMatrix<f64> {
    DMatrix::from_row_slice(n, d, v.as_slice())
}

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter().map(|c| c.abs().sum()).fold(0.0, f64::max)
}

/// Exact joint estimate by a fresh LU factorization of `M`.
pub fn solve_joint(joint: &JointState, lap: &LaplacianSet, alpha: f64) -> Result<DMatrix<f64>> {
    if !(alpha > 0.0) {
        return invalid(format!("alpha = {alpha} must be positive"));
    }
    if lap.n() != joint.n() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} users", joint.n()),
            got: format!("{} laplacian rows", lap.n()),
        });
    }
    let m = joint_matrix(joint, lap, alpha);
    let v = lu_solve_checked(&m, &joint.b_joint)?;
    Ok(unstack(&v, joint.n(), joint.d))
}

/// LU solve with one step of iterative refinement and a residual check.
pub(crate) fn lu_solve_checked(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let lu = m.clone().lu();
    let fail = |msg: &str| Error::Numerical {
        msg: msg.into(),
        condition: lu
            .try_inverse()
            .map_or(f64::INFINITY, |inv| one_norm(m) * one_norm(&inv)),
    };
    let mut v = lu.solve(b).ok_or_else(|| fail("joint system is singular"))?;
    let r = b - m * &v;
    if let Some(dv) = lu.solve(&r) {
        v += dv;
    }
    if !residual_ok(m, &v, b) {
        return Err(fail("joint solve residual above tolerance"));
    }
    Ok(v)
}

/// `‖M v − b‖ ≤ 1e-8 ‖b‖`.
pub fn residual_ok(m: &DMatrix<f64>, v: &DVector<f64>, b: &DVector<f64>) -> bool {
    let r = (m * v - b).norm();
    r <= 1e-8 * b.norm() || (b.norm() == 0.0 && r == 0.0)
}

/// Joint system maintained across observations.
///
/// For `n·d ≤ CACHED_JOINT_LIMIT` an explicit inverse is kept current by
/// Sherman–Morrison (each observation adds `φφᵀ` to one diagonal block) and
/// each solve is polished by one refinement step. Larger systems are
/// refactored on every solve.
#[derive(Debug, Clone)]
pub struct JointSolver {
    n: usize,
    d: usize,
    m: DMatrix<f64>,
    b: DVector<f64>,
    inv: Option<DMatrix<f64>>,
    since_refresh: usize,
}

impl JointSolver {
    /// `M = ridge·I + α (L ⊗ I)`; `l` may be any `n × n` Laplacian.
    pub fn new(n: usize, d: usize, l: &DMatrix<f64>, alpha: f64, ridge: f64) -> Result<Self> {
        let mut m = DMatrix::identity(n * d, n * d) * ridge;
        add_kron_identity(&mut m, l, alpha, d);
        let mut s = Self {
            n,
            d,
            m,
            b: DVector::zeros(n * d),
            inv: None,
            since_refresh: 0,
        };
        if n * d <= CACHED_JOINT_LIMIT {
            s.refresh()?;
        }
        Ok(s)
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn rhs(&self) -> &DVector<f64> {
        &self.b
    }

    pub fn inverse(&self) -> Option<&DMatrix<f64>> {
        self.inv.as_ref()
    }

    fn refresh(&mut self) -> Result<()> {
        let inv = self.m.clone().try_inverse().ok_or_else(|| Error::Numerical {
            msg: "joint matrix is singular".into(),
            condition: f64::INFINITY,
        })?;
        self.inv = Some(inv);
        self.since_refresh = 0;
        Ok(())
    }

    /// Adds `x xᵀ` to block `i` and `y x` to segment `i`.
    pub fn add(&mut self, i: usize, x: &DVector<f64>, y: f64) -> Result<()> {
        let (d, off) = (self.d, i * self.d);
        for r in 0..d {
            for c in 0..d {
                self.m[(off + r, off + c)] += x[r] * x[c];
            }
            self.b[off + r] += y * x[r];
        }
        let Some(inv) = self.inv.as_mut() else {
            return Ok(());
        };
        self.since_refresh += 1;
        if self.since_refresh >= REFRESH_EVERY {
            return self.refresh();
        }
        // (M + u uᵀ)⁻¹ with u = x placed in block i; M is not symmetric
        let col = inv.columns(off, d) * x;
        let row = x.transpose() * inv.rows(off, d);
        let denom = 1.0 + x.dot(&col.rows(off, d));
        inv.ger(-1.0 / denom, &col, &row.transpose(), 1.0);
        Ok(())
    }

    /// Current estimate as an `n × d` matrix.
    pub fn solve(&self) -> Result<DMatrix<f64>> {
        let v = match &self.inv {
            Some(inv) => {
                let mut v = inv * &self.b;
                let r = &self.b - &self.m * &v;
                v += inv * r;
                if residual_ok(&self.m, &v, &self.b) {
                    v
                } else {
                    lu_solve_checked(&self.m, &self.b)?
                }
            }
            None => lu_solve_checked(&self.m, &self.b)?,
        };
        Ok(unstack(&v, self.n, self.d))
    }

    /// `‖φ‖²_{M⁻¹}` for `φ` = `x` placed in block `i`: `xᵀ (M⁻¹)_ii x`.
    pub fn inv_quad(&self, i: usize, x: &DVector<f64>) -> Result<f64> {
        let off = i * self.d;
        match &self.inv {
            Some(inv) => Ok((x.transpose() * inv.view((off, off), (self.d, self.d)) * x)[0]),
            None => {
                let mut phi = DVector::zeros(self.n * self.d);
                phi.rows_mut(off, self.d).copy_from(x);
                let z = lu_solve_checked(&self.m, &phi)?;
                Ok(x.dot(&z.rows(off, self.d)))
            }
        }
    }

    /// The `(i, i)` block of `M⁻¹`, computed once per selection.
    pub fn inv_block(&self, i: usize) -> Result<DMatrix<f64>> {
        let (off, d) = (i * self.d, self.d);
        match &self.inv {
            Some(inv) => Ok(inv.view((off, off), (d, d)).into_owned()),
            None => {
                let mut rhs = DMatrix::zeros(self.n * d, d);
                for k in 0..d {
                    rhs[(off + k, k)] = 1.0;
                }
                let sol = self.m.clone().lu().solve(&rhs).ok_or_else(|| Error::Numerical {
                    msg: "joint matrix is singular".into(),
                    condition: f64::INFINITY,
                })?;
                Ok(sol.rows(off, d).into_owned())
            }
        }
    }
}

/// First-order local estimate `A_i⁻¹B_i − α A_i⁻¹ Σ_j 𝓛_ij A_j⁻¹B_j`.
pub fn estimate_local(i: usize, stats: &[UserStats], lap: &LaplacianSet, alpha: f64) -> DVector<f64> {
    let ridges: Vec<DVector<f64>> = stats.iter().map(|s| s.ridge()).collect();
    estimate_local_cached(i, stats, &ridges, lap, alpha)
}

/// As [`estimate_local`] with precomputed `A_j⁻¹B_j`.
pub fn estimate_local_cached(
    i: usize,
    stats: &[UserStats],
    ridges: &[DVector<f64>],
    lap: &LaplacianSet,
    alpha: f64,
) -> DVector<f64> {
    let d = stats[i].dim();
    let mut agg = DVector::zeros(d);
    for (j, r) in ridges.iter().enumerate() {
        let l = lap.random_walk[(i, j)];
        if l != 0.0 {
            agg.axpy(l, r, 1.0);
        }
    }
    &ridges[i] - stats[i].gram_inv() * agg * alpha
}

/// Precision block `Λ_i` and its graph-free counterpart `V_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrecisionState {
    pub lambda_i: DMatrix<f64>,
    pub v_i: DMatrix<f64>,
}

/// `Λ_i = A_i + 2α𝓛_ii I + α² Σ_j 𝓛_ij² A_j⁻¹` and `V_i = A_i + α𝓛_ii I`.
pub fn user_precision(i: usize, stats: &[UserStats], lap: &LaplacianSet, alpha: f64) -> PrecisionState {
    let d = stats[i].dim();
    let lii = lap.random_walk[(i, i)];
    let eye = DMatrix::<f64>::identity(d, d);
    let v_i = stats[i].gram() + &eye * (alpha * lii);
    let mut lambda_i = stats[i].gram() + &eye * (2.0 * alpha * lii);
    for (j, s) in stats.iter().enumerate() {
        let l = lap.random_walk[(i, j)];
        if l != 0.0 {
            lambda_i += s.gram_inv() * (alpha * alpha * l * l);
        }
    }
    PrecisionState { lambda_i, v_i }
}

/// `Δ̂_i = Σ_j 𝓛_ij θ̂_j`.
pub fn delta_hat(i: usize, theta_hat: &DMatrix<f64>, lap: &LaplacianSet) -> DVector<f64> {
    (lap.random_walk.row(i) * theta_hat).transpose()
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfidenceParams {
    pub alpha: f64,
    pub delta: f64,
    pub sigma: f64,
    pub delta_vec: DVector<f64>,
}

impl ConfidenceParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0) {
            return invalid(format!("alpha = {} must be positive", self.alpha));
        }
        if !(self.delta > 0.0 && self.delta <= 1.0) {
            return invalid(format!("delta = {} must lie in (0,1]", self.delta));
        }
        if !(self.sigma >= 0.0) {
            return invalid(format!("sigma = {} must be nonnegative", self.sigma));
        }
        Ok(())
    }
}

/// `σ·sqrt(2 log(det(V)^{1/2} / (δ det(αI)^{1/2}))) + √α ‖Δ̂‖`, with the log
/// argument clamped to at least 1.
pub fn beta_width(v: &DMatrix<f64>, params: &ConfidenceParams) -> Result<f64> {
    params.validate()?;
    let d = v.nrows() as f64;
    let log_arg = 0.5 * log_det_spd(v)? - 0.5 * d * params.alpha.ln() - params.delta.ln();
    Ok(params.sigma * (2.0 * log_arg.max(0.0)).sqrt() + params.alpha.sqrt() * params.delta_vec.norm())
}

/// `xᵀ P x` for a precomputed inverse `P`.
pub fn quad(p: &DMatrix<f64>, x: &DVector<f64>) -> f64 {
    (x.transpose() * p * x)[0]
}
