//! Ratings data → bandit instance.
//!
//! A sparse `user_id,item_id,rating` file is completed by alternating least
//! squares; item factors become arms, sampled user factors become the ground
//! truth, and an RBF graph over those user factors becomes the user graph.

use std::collections::HashMap;
use std::io::Read;
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{build_rbf_graph, Graph, GraphJson};
use crate::signals::{row_major, PopulationJson, UserPopulation};

#[derive(Debug, Clone, PartialEq)]
pub struct RatingsDataset {
    pub n_users: usize,
    pub n_items: usize,
    /// `(user, item, rating)` with dense indices.
    pub observed: Vec<(usize, usize, f64)>,
    pub rating_range: (f64, f64),
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
}

/// Dense index → original id, for both sides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdMap {
    pub users: Vec<String>,
    pub items: Vec<String>,
}

impl RatingsDataset {
    pub fn id_map(&self) -> IdMap {
        IdMap {
            users: self.user_ids.clone(),
            items: self.item_ids.clone(),
        }
    }
}

fn intern(map: &mut HashMap<String, usize>, ids: &mut Vec<String>, key: &str) -> usize {
    if let Some(&k) = map.get(key) {
        return k;
    }
    let k = ids.len();
    map.insert(key.to_string(), k);
    ids.push(key.to_string());
    k
}

/// Reads a `user_id,item_id,rating` CSV file with a header.
pub fn load_ratings(path: &Path, rating_range: (f64, f64)) -> Result<RatingsDataset> {
    let f = std::fs::File::open(path)?;
    load_ratings_from_reader(std::io::BufReader::new(f), rating_range)
}

/// Streaming parse; ids are remapped to dense indices in order of appearance.
/// Line numbers in errors are 1-based and count the header.
pub fn load_ratings_from_reader<R: Read>(reader: R, rating_range: (f64, f64)) -> Result<RatingsDataset> {
    let (lo, hi) = rating_range;
    if !(lo < hi) {
        return invalid(format!("rating range ({lo}, {hi}) is empty"));
    }
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(reader);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.to_ascii_lowercase()).collect();
    if header != ["user_id", "item_id", "rating"] {
        return Err(Error::Parse {
            line: 1,
            msg: format!("expected header user_id,item_id,rating, found {}", header.join(",")),
        });
    }
    let mut users = HashMap::new();
    let mut items = HashMap::new();
    let mut user_ids = Vec::new();
    let mut item_ids = Vec::new();
    let mut seen: HashMap<(usize, usize), usize> = HashMap::new();
    let mut observed = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Parse {
            line: e.position().map_or(0, |p| p.line() as usize),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        if rec.len() != 3 {
            return Err(Error::Parse {
                line,
                msg: format!("expected 3 fields, found {}", rec.len()),
            });
        }
        if rec[0].is_empty() || rec[1].is_empty() {
            return Err(Error::Parse { line, msg: "empty id".into() });
        }
        let rating: f64 = rec[2].parse().map_err(|_| Error::Parse {
            line,
            msg: format!("rating {:?} is not a number", &rec[2]),
        })?;
        if !rating.is_finite() || rating < lo || rating > hi {
            return Err(Error::Validation(format!(
                "rating {rating} at line {line} outside declared range [{lo}, {hi}]"
            )));
        }
        let u = intern(&mut users, &mut user_ids, &rec[0]);
        let i = intern(&mut items, &mut item_ids, &rec[1]);
        if let Some(&first) = seen.get(&(u, i)) {
            return Err(Error::Duplicate {
                user: rec[0].to_string(),
                item: rec[1].to_string(),
                first,
                second: line,
            });
        }
        seen.insert((u, i), line);
        observed.push((u, i, rating));
    }
    Ok(RatingsDataset {
        n_users: user_ids.len(),
        n_items: item_ids.len(),
        observed,
        rating_range,
        user_ids,
        item_ids,
    })
}

/// Low-rank completion `M ≈ U X`.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedModel {
    /// `n_users × rank`.
    pub user_factors: DMatrix<f64>,
    /// `rank × n_items`.
    pub item_factors: DMatrix<f64>,
    pub rank: usize,
    /// Observed-entry RMSE after each outer iteration.
    pub rmse_history: Vec<f64>,
    /// Regularized objective after each outer iteration.
    pub objective_history: Vec<f64>,
}

impl FactorizedModel {
    pub fn predict(&self, user: usize, item: usize) -> f64 {
        self.user_factors.row(user).transpose().dot(&self.item_factors.column(item))
    }

    pub fn rmse(&self, data: &RatingsDataset) -> f64 {
        let sse: f64 = data.observed.iter().map(|&(u, i, r)| (r - self.predict(u, i)).powi(2)).sum();
        (sse / data.observed.len() as f64).sqrt()
    }

    fn objective(&self, data: &RatingsDataset, reg: f64) -> f64 {
        let sse: f64 = data.observed.iter().map(|&(u, i, r)| (r - self.predict(u, i)).powi(2)).sum();
        sse + reg * (self.user_factors.norm_squared() + self.item_factors.norm_squared())
    }
}

/// Solves `(G + reg I) z = h`, falling back to a pseudo-inverse when singular.
fn ridge_solve(g: DMatrix<f64>, h: &DVector<f64>, reg: f64) -> DVector<f64> {
    let k = g.nrows();
    let sys = g + DMatrix::identity(k, k) * reg;
    if let Some(c) = Cholesky::new(sys.clone()) {
        return c.solve(h);
    }
    sys.svd(true, true).solve(h, 1e-12).unwrap_or_else(|_| DVector::zeros(k))
}

/// Alternating least squares on the observed entries with ridge `reg`.
pub fn factorize(data: &RatingsDataset, rank: usize, reg: f64, iters: usize, seed: u64) -> Result<FactorizedModel> {
    if rank == 0 {
        return invalid("rank must be at least 1");
    }
    if data.observed.is_empty() {
        return invalid("dataset has no ratings");
    }
    if !(reg >= 0.0) {
        return invalid(format!("reg = {reg} must be nonnegative"));
    }
    let mut rng = crate::stream_rng(seed, crate::STREAM_THETA);
    let init = Normal::new(0.0, 0.1).expect("valid normal");
    let mut model = FactorizedModel {
        user_factors: DMatrix::from_fn(data.n_users, rank, |_, _| init.sample(&mut rng)),
        item_factors: DMatrix::from_fn(rank, data.n_items, |_, _| init.sample(&mut rng)),
        rank,
        rmse_history: Vec::new(),
        objective_history: Vec::new(),
    };
    let mut by_user: Vec<Vec<(usize, f64)>> = vec![Vec::new(); data.n_users];
    let mut by_item: Vec<Vec<(usize, f64)>> = vec![Vec::new(); data.n_items];
    for &(u, i, r) in &data.observed {
        by_user[u].push((i, r));
        by_item[i].push((u, r));
    }
    for _ in 0..iters {
        for (u, obs) in by_user.iter().enumerate() {
            let mut g = DMatrix::zeros(rank, rank);
            let mut h = DVector::zeros(rank);
            for &(i, r) in obs {
                let x = model.item_factors.column(i);
                g.ger(1.0, &x, &x, 1.0);
                h.axpy(r, &x, 1.0);
            }
            let z = ridge_solve(g, &h, reg);
            model.user_factors.set_row(u, &z.transpose());
        }
        for (i, obs) in by_item.iter().enumerate() {
            let mut g = DMatrix::zeros(rank, rank);
            let mut h = DVector::zeros(rank);
            for &(u, r) in obs {
                let w = model.user_factors.row(u).transpose();
                g.ger(1.0, &w, &w, 1.0);
                h.axpy(r, &w, 1.0);
            }
            let z = ridge_solve(g, &h, reg);
            model.item_factors.set_column(i, &z);
        }
        model.rmse_history.push(model.rmse(data));
        model.objective_history.push(model.objective(data, reg));
    }
    if model.user_factors.iter().chain(model.item_factors.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numerical {
            msg: "factorization produced non-finite factors".into(),
            condition: f64::INFINITY,
        });
    }
    Ok(model)
}

/// Maps a rating into `[0, 1]` affinely.
pub fn normalize_rating(r: f64, range: (f64, f64)) -> f64 {
    (r - range.0) / (range.1 - range.0)
}

/// Everything the simulator needs from a ratings dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct BanditInstance {
    pub graph: Graph,
    /// Candidate pool, one unit-ball arm per row (`n_items × d`).
    pub arms: DMatrix<f64>,
    /// Ground-truth user vectors, one per sampled user.
    pub theta: DMatrix<f64>,
    /// Dense indices of the sampled users.
    pub users: Vec<usize>,
    /// `xᵀθ = payoff_scale · (r̂ − r_min)/(r_max − r_min) − payoff_scale · r_min/(r_max − r_min)`.
    pub payoff_scale: f64,
}

/// Samples users, rescales factors into the unit ball and builds the RBF user graph.
pub fn build_bandit_instance(
    model: &FactorizedModel,
    rating_range: (f64, f64),
    rho: f64,
    threshold: f64,
    n_sample: usize,
    seed: u64,
) -> Result<BanditInstance> {
    let n_users = model.user_factors.nrows();
    if n_sample == 0 || n_sample > n_users {
        return invalid(format!("n_sample = {n_sample} must lie in 1..={n_users}"));
    }
    let users: Vec<usize> = if n_sample == n_users {
        (0..n_users).collect()
    } else {
        let mut rng = crate::stream_rng(seed, crate::STREAM_SIM);
        let mut idx: Vec<usize> = rand::seq::index::sample(&mut rng, n_users, n_sample).into_iter().collect();
        idx.sort_unstable();
        idx
    };
    let c = model.item_factors.column_iter().map(|col| col.norm()).fold(0.0, f64::max);
    if !(c > 0.0 && c.is_finite()) {
        return invalid("item factors are all zero");
    }
    let arms = model.item_factors.transpose() / c;
    let sampled = model.user_factors.select_rows(&users);
    let span = rating_range.1 - rating_range.0;
    let mut theta = &sampled * (c / span);
    let max_row = theta.row_iter().map(|r| r.norm()).fold(0.0, f64::max);
    let payoff_scale = if max_row > 1.0 { 1.0 / max_row } else { 1.0 };
    theta *= payoff_scale;
    let graph = build_rbf_graph(&sampled, rho, threshold)?;
    Ok(BanditInstance {
        graph,
        arms,
        theta,
        users,
        payoff_scale,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Equal-width histogram of ratings over the declared range.
pub fn rating_histogram(data: &RatingsDataset, bins: usize) -> Histogram {
    let (lo, hi) = data.rating_range;
    let bins = bins.max(1);
    let width = (hi - lo) / bins as f64;
    let edges = (0..=bins).map(|k| lo + width * k as f64).collect();
    let mut counts = vec![0; bins];
    for &(_, _, r) in &data.observed {
        let k = (((r - lo) / width) as usize).min(bins - 1);
        counts[k] += 1;
    }
    Histogram { edges, counts }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmsJson {
    pub m: usize,
    pub d: usize,
    pub arms: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceMeta {
    pub users: Vec<usize>,
    pub payoff_scale: f64,
}

pub const BUNDLE_GRAPH: &str = "graph.json";
pub const BUNDLE_ARMS: &str = "arms.json";
pub const BUNDLE_POPULATION: &str = "population.json";
pub const BUNDLE_META: &str = "instance.json";

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&std::fs::read(path)?)?)
}

/// Writes graph, arm pool, population and metadata files into `dir`.
pub fn write_bundle(dir: &Path, inst: &BanditInstance) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_json(&dir.join(BUNDLE_GRAPH), &inst.graph.to_json())?;
    write_json(
        &dir.join(BUNDLE_ARMS),
        &ArmsJson {
            m: inst.arms.nrows(),
            d: inst.arms.ncols(),
            arms: row_major(&inst.arms),
        },
    )?;
    let pop = PopulationJson {
        n: inst.theta.nrows(),
        d: inst.theta.ncols(),
        gamma: 0.0,
        theta: row_major(&inst.theta),
    };
    write_json(&dir.join(BUNDLE_POPULATION), &pop)?;
    write_json(
        &dir.join(BUNDLE_META),
        &InstanceMeta {
            users: inst.users.clone(),
            payoff_scale: inst.payoff_scale,
        },
    )
}

pub fn read_bundle(dir: &Path) -> Result<BanditInstance> {
    let graph = Graph::from_json(&read_json::<GraphJson>(&dir.join(BUNDLE_GRAPH))?)?;
    let arms: ArmsJson = read_json(&dir.join(BUNDLE_ARMS))?;
    if arms.arms.len() != arms.m * arms.d {
        return invalid("arms.json has inconsistent dimensions");
    }
    let pop = UserPopulation::from_json(&read_json(&dir.join(BUNDLE_POPULATION))?)?;
    let meta: InstanceMeta = read_json(&dir.join(BUNDLE_META))?;
    if graph.n() != pop.n() || arms.d != pop.d() {
        return invalid("bundle files disagree on sizes");
    }
    Ok(BanditInstance {
        graph,
        arms: DMatrix::from_row_slice(arms.m, arms.d, &arms.arms),
        theta: pop.theta,
        users: meta.users,
        payoff_scale: meta.payoff_scale,
    })
}
