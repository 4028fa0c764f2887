//! `graphbandit`: run, sweep, bench and ingest from the command line.
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use graph_bandits::experiment::{bench_scaling, run_experiment, sweep, ExecOptions, ExperimentConfig, SweepAxis};
use graph_bandits::ingest::{build_bandit_instance, factorize, load_ratings, rating_histogram, write_bundle};
use graph_bandits::Error;

#[derive(Parser)]
#[command(name = "graphbandit", version, about = "Graph-regularized contextual bandit experiments")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment config (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output_dir` in the config.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Base seed; overrides `seed` in the config.
    #[arg(long)]
    seed: Option<u64>,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    #[arg(long)]
    checkpoint_every: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured policy and write ledgers, summaries and a manifest.
    Run(Common),
    /// Repeat `run` for each value of one parameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// gamma, threshold, er_p, ba_m, ws_p or ws_m.
        #[arg(long)]
        axis: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Median observe() latency per policy and user count.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = [20, 40, 80])]
        n_values: Vec<usize>,
    },
    /// Factorize a ratings CSV and write a bandit-instance bundle.
    Ingest {
        /// CSV with header `user_id,item_id,rating`.
        #[arg(long)]
        ratings: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        rank: usize,
        #[arg(long, default_value_t = 0.1)]
        reg: f64,
        #[arg(long, default_value_t = 20)]
        iters: usize,
        /// Users kept in the instance.
        #[arg(long, default_value_t = 20)]
        n_sample: usize,
        #[arg(long, default_value_t = 0.1)]
        rho: f64,
        #[arg(long, default_value_t = 0.5)]
        threshold: f64,
        #[arg(long, default_value_t = 0.0)]
        rating_min: f64,
        #[arg(long, default_value_t = 5.0)]
        rating_max: f64,
        #[arg(long, default_value_t = 10)]
        bins: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Config(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn load(common: &Common) -> Result<(ExperimentConfig, ExecOptions), Failure> {
    let mut cfg = ExperimentConfig::load(&common.config)?;
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(c) = common.checkpoint_every {
        cfg.checkpoint_every = c;
    }
    cfg.validate().map_err(|e| Failure::Config(e.to_string()))?;
    let out = common
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Failure::Config("no output directory: pass --out or set output_dir".into()))?;
    let jobs = common.jobs.max(1);
    Ok((cfg, ExecOptions { out, jobs }))
}

fn write_json<T: serde::Serialize>(path: &Path, v: &T) -> Result<(), Error> {
    std::fs::write(path, serde_json::to_vec_pretty(v)?)?;
    Ok(())
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(common) => {
            let (cfg, exec) = load(&common)?;
            let rep = run_experiment(&cfg, &exec)?;
            for p in &rep.policies {
                println!(
                    "{:<16} final regret {:>10.4} ± {:.4}",
                    p.label,
                    p.aggregate.final_mean(),
                    p.aggregate.final_std()
                );
            }
            if let Some(pass) = rep.manifest.noise_bound.pass {
                println!("noise bound {}", if pass { "ok" } else { "below threshold" });
            }
            println!("wrote {}", exec.out.display());
        }
        Command::Sweep { common, axis, values } => {
            let (cfg, exec) = load(&common)?;
            let axis: SweepAxis = axis.parse().map_err(|e: Error| Failure::Config(e.to_string()))?;
            for r in sweep(&cfg, axis, &values, &exec)? {
                println!("{}={:<8} {:<16} {:>10.4}", r.axis, r.value, r.policy, r.final_mean);
            }
            println!("wrote {}", exec.out.join("sweep_summary.csv").display());
        }
        Command::Bench { common, n_values } => {
            let (cfg, exec) = load(&common)?;
            let (rows, ratios) = bench_scaling(&cfg, &n_values, Some(&exec.out))?;
            for r in rows {
                println!("{:<16} n={:<5} {:>12.0} ns", r.policy, r.n, r.median_ns);
            }
            for r in ratios {
                println!("{:<16} {}→{} ×{:.2}", r.policy, r.n_from, r.n_to, r.ratio);
            }
        }
        Command::Ingest {
            ratings,
            out,
            rank,
            reg,
            iters,
            n_sample,
            rho,
            threshold,
            rating_min,
            rating_max,
            bins,
            seed,
        } => {
            let range = (rating_min, rating_max);
            let data = load_ratings(&ratings, range)?;
            let model = factorize(&data, rank, reg, iters, seed)?;
            let inst = build_bandit_instance(&model, range, rho, threshold, n_sample, seed)?;
            write_bundle(&out, &inst)?;
            write_json(&out.join("id_map.json"), &data.id_map())?;
            write_json(&out.join("histogram.json"), &rating_histogram(&data, bins))?;
            write_json(
                &out.join("factorization.json"),
                &serde_json::json!({
                    "rank": rank,
                    "reg": reg,
                    "rmse_history": model.rmse_history,
                    "objective_history": model.objective_history,
                }),
            )?;
            println!(
                "{} users, {} items, {} ratings; rmse {:.4}; wrote {}",
                data.n_users,
                data.n_items,
                data.observed.len(),
                model.rmse_history.last().copied().unwrap_or(f64::NAN),
                out.display()
            );
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(m)) => {
            eprintln!("config error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(3)
        }
    }
}
