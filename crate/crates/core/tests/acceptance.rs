//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fail. Tolerances are pinned below.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::time::Instant;

use graph_bandits::env::{run, ArmSource, Environment, RunOptions, RunOutput};
use graph_bandits::estimator::{
    joint_matrix, residual_ok, solve_joint, user_precision, EstimatorState, JointSolver,
};
use graph_bandits::experiment::{
    bench_scaling, build_instance, build_policy, run_experiment, sweep, ExecOptions, ExperimentConfig, PolicyConfig,
    PolicyKind, SweepAxis,
};
use graph_bandits::graph::{
    build_ba_graph, build_er_graph, build_rbf_graph, build_ws_graph, laplacians, smoothness, smoothness_pairwise,
    Graph,
};
use graph_bandits::ingest::{build_bandit_instance, factorize, load_ratings_from_reader, normalize_rating};
use graph_bandits::signals::random_theta0;
use graph_bandits::stream_rng;
use nalgebra::{DMatrix, DVector};
use rand::Rng;

const PRECISION_REL_TOL: f64 = 1e-8;
const PRECISION_TIME_S: f64 = 10.0;
const DECOUPLE_TOL: f64 = 1e-10;
const IDENTITY_REL_TOL: f64 = 1e-10;
const IDENTITY_TIME_S: f64 = 5.0;
const TAYLOR_TIME_S: f64 = 300.0;
const PSI_SLOPE_FRACTION: f64 = 0.9;
const PSI_HORIZON: usize = 2000;
const FIG2_SE_MULTIPLE: f64 = 2.0;
const FIG2_TIME_S: f64 = 1800.0;
const SCALING_LOCAL_MAX: f64 = 3.0;
const NOISE_BOUND_FRACTION: f64 = 0.9;
const INGEST_RMSE: f64 = 1e-6;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn config(name: &str) -> ExperimentConfig {
    ExperimentConfig::load(&configs().join(name)).unwrap()
}

fn exec(dir: &Path) -> ExecOptions {
    ExecOptions {
        out: dir.to_path_buf(),
        jobs: 1,
    }
}

fn unit(rng: &mut rand_chacha::ChaCha8Rng, d: usize) -> DVector<f64> {
    let v: DVector<f64> = DVector::from_fn(d, |_, _| rng.random_range(-1.0..1.0));
    let n = v.norm();
    v / n.max(1.0)
}

/// A random small trajectory: graph, statistics after each step, joint solves.
struct Trajectory {
    lap: graph_bandits::graph::LaplacianSet,
    est: EstimatorState,
    worst_residual: f64,
    residual_ok: bool,
}

fn trajectory(seed: u64) -> Trajectory {
    let mut rng = stream_rng(seed, 11);
    let n = rng.random_range(2..=8);
    let d = rng.random_range(1..=4);
    let g = build_er_graph(n, rng.random_range(0.2..0.9), seed).unwrap();
    let lap = laplacians(&g);
    let mut est = EstimatorState::new(n, d, 0.01).unwrap();
    let mut worst = 0.0f64;
    let mut ok = true;
    for _ in 0..rng.random_range(5..40) {
        let i = rng.random_range(0..n);
        let x = unit(&mut rng, d);
        let y = rng.random_range(-1.0..1.0);
        est.update(i, &x, y).unwrap();
        let js = est.joint_state(0.01);
        let theta = solve_joint(&js, &lap, 1.0).unwrap();
        let m = joint_matrix(&js, &lap, 1.0);
        let v = DVector::from_iterator(n * d, theta.transpose().iter().copied());
        let r = (&m * &v - &js.b_joint).norm() / js.b_joint.norm().max(f64::MIN_POSITIVE);
        worst = worst.max(r);
        ok &= residual_ok(&m, &v, &js.b_joint);
    }
    Trajectory {
        lap,
        est,
        worst_residual: worst,
        residual_ok: ok,
    }
}

fn c1_precision_oracle() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let tr = trajectory(seed);
        let (n, d) = (tr.est.n(), tr.est.d());
        let mut js = tr.est.joint_state(0.0);
        for (b, u) in js.blocks.iter_mut().zip(&tr.est.users) {
            *b = u.gram().clone();
        }
        let a_inv = js.dense().try_inverse().unwrap();
        let m = joint_matrix(&js, &tr.lap, 1.0);
        let dense = &m * a_inv * m.transpose();
        for i in 0..n {
            let lam = user_precision(i, &tr.est.users, &tr.lap, 1.0).lambda_i;
            let blk = dense.view((i * d, i * d), (d, d)).into_owned();
            worst = worst.max((&lam - &blk).norm() / blk.norm());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        worst <= PRECISION_REL_TOL && secs < PRECISION_TIME_S,
        format!("max rel err {worst:.2e} (tol {PRECISION_REL_TOL:.0e}), {secs:.2}s"),
    )
}

fn c2_joint_solver() -> Outcome {
    let mut worst = 0.0f64;
    let mut ok = true;
    for seed in 0..50 {
        let tr = trajectory(seed);
        worst = worst.max(tr.worst_residual);
        ok &= tr.residual_ok;
    }
    // incremental solver on a default-size trajectory
    let g = build_er_graph(20, 0.4, 0).unwrap();
    let lap = laplacians(&g);
    let mut solver = JointSolver::new(20, 5, &lap.random_walk, 1.0, 0.01).unwrap();
    let mut rng = stream_rng(0, 12);
    for _ in 0..1000 {
        let x = unit(&mut rng, 5);
        solver.add(rng.random_range(0..20), &x, rng.random_range(-1.0..1.0)).unwrap();
    }
    let theta = solver.solve().unwrap();
    let v = DVector::from_iterator(100, theta.transpose().iter().copied());
    ok &= residual_ok(solver.matrix(), &v, solver.rhs());
    // empty graph: joint solve decouples into per-user ridge with weight α + ridge
    let (n, d, alpha, ridge) = (6, 4, 1.0, 0.01);
    let mut est = EstimatorState::new(n, d, ridge).unwrap();
    for _ in 0..100 {
        let x = unit(&mut rng, d);
        est.update(rng.random_range(0..n), &x, rng.random_range(-1.0..1.0)).unwrap();
    }
    let joint = solve_joint(&est.joint_state(ridge), &laplacians(&Graph::empty(n)), alpha).unwrap();
    let mut dec = 0.0f64;
    for i in 0..n {
        let u = &est.users[i];
        let want = (u.raw_gram() + DMatrix::identity(d, d) * (alpha + ridge)).lu().solve(u.b_vec()).unwrap();
        dec = dec.max((joint.row(i).transpose() - want).norm());
    }
    outcome(
        ok && dec <= DECOUPLE_TOL,
        format!("max rel residual {worst:.2e} (tol 1e-8), empty-graph gap {dec:.2e} (tol {DECOUPLE_TOL:.0e})"),
    )
}

fn c3_pairwise_identity() -> Outcome {
    let start = Instant::now();
    let mut worst = 0.0f64;
    let mut failures = 0;
    for seed in 0..100u64 {
        let mut rng = stream_rng(seed, 13);
        let n = rng.random_range(3..=20);
        let d = rng.random_range(1..=8);
        let theta = random_theta0(n, d, seed);
        let g = match seed % 4 {
            0 => build_er_graph(n, rng.random_range(0.2..0.9), seed).unwrap(),
            1 => build_ba_graph(n, rng.random_range(1..n.min(4)), seed).unwrap(),
            2 => build_ws_graph(n, 2, rng.random_range(0.0..1.0), seed).unwrap(),
            _ => build_rbf_graph(&theta, 0.1, 0.5).unwrap(),
        };
        let a = smoothness(&theta, &laplacians(&g)).unwrap();
        let b = smoothness_pairwise(&theta, &g).unwrap();
        let rel = (a - b).abs() / a.abs().max(b.abs()).max(f64::MIN_POSITIVE);
        worst = worst.max(rel);
        if rel > IDENTITY_REL_TOL {
            failures += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < IDENTITY_TIME_S,
        format!(
            "{failures}/100 graphs exceed {IDENTITY_REL_TOL:.0e}, max rel err {worst:.2e}; the forms agree only on regular graphs"
        ),
    )
}

fn graphucb_runs(cfg: &ExperimentConfig, kind: PolicyKind, horizon: usize, opts: RunOptions) -> Vec<RunOutput> {
    (0..cfg.runs as u64)
        .map(|k| {
            let seed = cfg.seed + k;
            let inst = build_instance(cfg, None, seed).unwrap();
            let mut p = build_policy(cfg, &PolicyConfig::new(kind), &inst.graph, inst.env.d(), 0.0).unwrap();
            run(&inst.env, p.as_mut(), horizon, seed, opts).unwrap()
        })
        .collect()
}

fn psi_all_in_unit(outs: &[RunOutput]) -> (bool, usize) {
    let mut count = 0;
    let mut ok = true;
    for o in outs {
        for r in &o.diagnostics.rows {
            if let Some(p) = r.psi {
                count += 1;
                ok &= p > 0.0 && p < 1.0;
            }
        }
    }
    (ok, count)
}

fn c4_taylor(psi_runs: &mut Vec<RunOutput>) -> Outcome {
    let start = Instant::now();
    let cfg = config("fig5_approximation.toml");
    let opts = RunOptions {
        checkpoint_every: 10,
        probe_approximation: true,
        trace: false,
    };
    let outs = graphucb_runs(&cfg, PolicyKind::Graphucb, cfg.horizon, opts);
    let at = |t: usize, f: fn(&graph_bandits::env::ApproxRow) -> f64| -> f64 {
        outs.iter()
            .map(|o| f(o.diagnostics.approx.iter().find(|r| r.t == t).unwrap()))
            .sum::<f64>()
            / outs.len() as f64
    };
    let gap50 = at(50, |r| r.local_joint_gap);
    let gap1000 = at(1000, |r| r.local_joint_gap);
    let joint100 = at(100, |r| r.joint_err);
    let local100 = at(100, |r| r.local_err);
    let ridge100 = at(100, |r| r.ridge_err);
    psi_runs.extend(outs);
    let secs = start.elapsed().as_secs_f64();
    let decay = gap1000 < gap50;
    let joint_better = joint100 < ridge100;
    let local_better = local100 < ridge100;
    outcome(
        decay && joint_better && local_better && secs < TAYLOR_TIME_S,
        format!(
            "gap t=50 {gap50:.3} → t=1000 {gap1000:.3} [{}]; err t=100 joint {joint100:.3} local {local100:.3} ridge {ridge100:.3} [joint<ridge {}, local<ridge {}]",
            mark(decay),
            mark(joint_better),
            mark(local_better)
        ),
    )
}

fn mark(b: bool) -> &'static str {
    if b {
        "ok"
    } else {
        "no"
    }
}

fn slope(points: &[(f64, f64)]) -> f64 {
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let num: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let den: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    num / den
}

fn c5_psi(psi_runs: &[RunOutput]) -> Outcome {
    let cfg = config("fig1_diagnostics.toml");
    let outs = graphucb_runs(&cfg, PolicyKind::Graphucb, PSI_HORIZON, RunOptions::default());
    let (in_unit_a, ca) = psi_all_in_unit(psi_runs);
    let (in_unit_b, cb) = psi_all_in_unit(&outs);
    let mut users = 0;
    let mut rising = 0;
    for o in &outs {
        for i in 0..cfg.n {
            let pts: Vec<(f64, f64)> = o
                .diagnostics
                .rows
                .iter()
                .filter(|r| r.user == i)
                .filter_map(|r| Some((r.t as f64, r.psi?)))
                .collect();
            if pts.len() < 2 {
                continue;
            }
            users += 1;
            if slope(&pts) >= 0.0 {
                rising += 1;
            }
        }
    }
    let frac = rising as f64 / users as f64;
    outcome(
        in_unit_a && in_unit_b && frac >= PSI_SLOPE_FRACTION,
        format!(
            "Ψ in (0,1) at {} checkpoints [{}]; nonnegative slope for {rising}/{users} users ({:.1}%, need {:.0}%)",
            ca + cb,
            mark(in_unit_a && in_unit_b),
            100.0 * frac,
            100.0 * PSI_SLOPE_FRACTION
        ),
    )
}

fn fig2_check(name: &str) -> (bool, String) {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(name);
    cfg.policies.retain(|p| p.kind != PolicyKind::Club);
    let rep = run_experiment(&cfg, &exec(dir.path())).unwrap();
    let get = |l: &str| rep.policy(l).unwrap().aggregate.clone();
    let (g, l, lin, gob) = (get("graphucb"), get("graphucb-local"), get("linucb"), get("goblin"));
    let pooled = (g.final_se().powi(2) + lin.final_se().powi(2)).sqrt();
    let gap_ok = lin.final_mean() - g.final_mean() > FIG2_SE_MULTIPLE * pooled;
    let order_ok = g.final_mean() <= l.final_mean() && l.final_mean() <= gob.final_mean();
    (
        gap_ok && order_ok,
        format!(
            "{name}: graphucb {:.2} local {:.2} goblin {:.2} linucb {:.2}; gap {:.2} vs {:.2} [{}], ordering [{}]",
            g.final_mean(),
            l.final_mean(),
            gob.final_mean(),
            lin.final_mean(),
            lin.final_mean() - g.final_mean(),
            FIG2_SE_MULTIPLE * pooled,
            mark(gap_ok),
            mark(order_ok)
        ),
    )
}

fn c6_fig2() -> Outcome {
    let start = Instant::now();
    let (a, da) = fig2_check("fig2_rbf.toml");
    let (b, db) = fig2_check("fig2_er.toml");
    let secs = start.elapsed().as_secs_f64();
    outcome(a && b && secs < FIG2_TIME_S, format!("{da}; {db}"))
}

fn graphucb_sweep(name: &str, axis: SweepAxis, values: &[f64]) -> Vec<f64> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = config(name);
    cfg.policies = vec![PolicyConfig::new(PolicyKind::Graphucb)];
    sweep(&cfg, axis, values, &exec(dir.path()))
        .unwrap()
        .iter()
        .map(|r| r.final_mean)
        .collect()
}

fn c7_fig3() -> Outcome {
    let g = graphucb_sweep("fig3a_gamma.toml", SweepAxis::Gamma, &[0.0, 1.0, 10.0]);
    let s = graphucb_sweep("fig3b_threshold.toml", SweepAxis::Threshold, &[0.2, 0.5, 0.8]);
    let g_ok = g.windows(2).all(|w| w[1] <= w[0]);
    let s_ok = s.windows(2).all(|w| w[1] >= w[0]);
    let f = |v: &[f64]| v.iter().map(|x| format!("{x:.2}")).collect::<Vec<_>>().join(", ");
    outcome(
        g_ok && s_ok,
        format!(
            "gamma 0,1,10 → [{}] nonincreasing [{}]; threshold 0.2,0.5,0.8 → [{}] nondecreasing [{}]",
            f(&g),
            mark(g_ok),
            f(&s),
            mark(s_ok)
        ),
    )
}

fn c8_scaling() -> Outcome {
    let mut cfg = config("bench_scaling.toml");
    cfg.horizon = 1000;
    let (_, ratios) = bench_scaling(&cfg, &[20, 40, 80], None).unwrap();
    let r = |p: &str| -> Vec<f64> { ratios.iter().filter(|r| r.policy == p).map(|r| r.ratio).collect() };
    let (full, local) = (r("graphucb"), r("graphucb-local"));
    let local_ok = local.iter().all(|&x| x < SCALING_LOCAL_MAX);
    let full_ok = full.iter().zip(&local).all(|(f, l)| f > l);
    outcome(
        local_ok && full_ok,
        format!("per doubling: local {local:.2?} (< {SCALING_LOCAL_MAX}), graphucb {full:.2?} (> local)"),
    )
}

fn c9_noise_bound() -> Outcome {
    let cfg = config("fig6_noise_bound.toml");
    let outs = graphucb_runs(&cfg, PolicyKind::Graphucb, cfg.horizon, RunOptions::default());
    let (mut hits, mut total) = (0, 0);
    for o in &outs {
        for r in &o.diagnostics.rows {
            if let (Some(l), Some(rhs)) = (r.nb_lhs, r.nb_rhs) {
                total += 1;
                if l <= rhs {
                    hits += 1;
                }
            }
        }
    }
    let frac = hits as f64 / total as f64;
    outcome(
        frac >= NOISE_BOUND_FRACTION,
        format!("bound held at {hits}/{total} checkpoints ({:.1}%, need {:.0}%)", 100.0 * frac, 100.0 * NOISE_BOUND_FRACTION),
    )
}

fn c10_determinism() -> Outcome {
    let mut cfg = config("fig2_rbf.toml");
    cfg.runs = 3;
    cfg.horizon = 300;
    cfg.probe_approximation = true;
    cfg.trace = true;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ra = run_experiment(&cfg, &exec(a.path())).unwrap();
    let rb = run_experiment(
        &cfg,
        &ExecOptions {
            out: b.path().to_path_buf(),
            jobs: 2,
        },
    )
    .unwrap();
    let ledgers: Vec<_> = ra.manifest.outputs.iter().filter(|o| o.path.ends_with("_ledger.csv")).collect();
    let same = ra.manifest.outputs == rb.manifest.outputs;
    let bytes_same = ledgers
        .iter()
        .all(|o| std::fs::read(a.path().join(&o.path)).unwrap() == std::fs::read(b.path().join(&o.path)).unwrap());
    outcome(
        same && bytes_same && !ledgers.is_empty(),
        format!("{} ledgers and {} outputs identical across reruns", ledgers.len(), ra.manifest.outputs.len()),
    )
}

fn c11_ingest() -> Outcome {
    let u = [1.0, 2.0, 0.5, 1.5, 3.0, 0.2, 1.1, 0.8];
    let v = [0.5, 1.0, 1.5, 0.8, 0.3, 1.2, 0.9, 1.6, 0.1, 0.7];
    let mut text = String::from("user_id,item_id,rating\n");
    for (i, a) in u.iter().enumerate() {
        for (j, b) in v.iter().enumerate() {
            text.push_str(&format!("u{i},m{j},{}\n", a * b));
        }
    }
    let data = load_ratings_from_reader(text.as_bytes(), (0.0, 5.0)).unwrap();
    let model = factorize(&data, 1, 1e-10, 200, 0).unwrap();
    let rmse = model.rmse(&data);
    let inst = build_bandit_instance(&model, (0.0, 5.0), 0.1, 0.5, u.len(), 0).unwrap();
    let env = Environment::new(
        inst.theta.clone(),
        ArmSource::PoolSubset {
            pool: inst.arms.clone(),
            m: 5,
        },
        0.01,
        laplacians(&inst.graph),
    );
    let env_ok = env.and_then(|e| e.check_invariants()).is_ok();
    let ends = normalize_rating(0.0, (0.0, 5.0)) == 0.0
        && normalize_rating(5.0, (0.0, 5.0)) == 1.0
        && normalize_rating(1.0, (1.0, 5.0)) == 0.0
        && normalize_rating(5.0, (1.0, 5.0)) == 1.0;
    outcome(
        rmse <= INGEST_RMSE && env_ok && ends,
        format!("rank-1 RMSE {rmse:.2e} (tol {INGEST_RMSE:.0e}), invariants [{}], endpoints [{}]", mark(env_ok), mark(ends)),
    )
}

fn main() {
    let mut psi_runs = Vec::new();
    let mut results: Vec<(&str, Result<Outcome, String>, f64)> = Vec::new();
    let mut check = |name: &'static str, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let r = catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
            e.downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into())
        });
        results.push((name, r, start.elapsed().as_secs_f64()));
    };
    check("1 block precision oracle", &mut c1_precision_oracle);
    check("2 joint solver", &mut c2_joint_solver);
    check("3 pairwise smoothness identity", &mut c3_pairwise_identity);
    check("4 local approximation", &mut || c4_taylor(&mut psi_runs));
    let psi = std::mem::take(&mut psi_runs);
    check("5 psi bounds and trend", &mut || c5_psi(&psi));
    check("6 policy ordering", &mut c6_fig2);
    check("7 smoothness and sparsity trends", &mut c7_fig3);
    check("8 update scaling", &mut c8_scaling);
    check("9 noise bound", &mut c9_noise_bound);
    check("10 determinism", &mut c10_determinism);
    check("11 ingestion fixture", &mut c11_ingest);
    let mut failed = 0;
    for (name, r, secs) in &results {
        let (pass, detail) = match r {
            Ok(o) => (o.pass, o.detail.clone()),
            Err(msg) => (false, format!("panicked: {msg}")),
        };
        if !pass {
            failed += 1;
        }
        println!("{} [{name}] {detail} ({secs:.1}s)", if pass { "PASS" } else { "FAIL" });
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
