use graph_bandits::env::{ArmSource, Environment};
use graph_bandits::graph::laplacians;
use graph_bandits::ingest::{
    build_bandit_instance, factorize, load_ratings, load_ratings_from_reader, normalize_rating, read_bundle,
    write_bundle, RatingsDataset,
};
use graph_bandits::stream_rng;
use rand::Rng;

fn rank_one_fixture() -> RatingsDataset {
    let u = [1.0, 2.0, 0.5, 1.5, 3.0, 0.2];
    let v = [0.5, 1.0, 1.5, 0.8, 0.3, 1.2, 0.9];
    let mut text = String::from("user_id,item_id,rating\n");
    for (i, a) in u.iter().enumerate() {
        for (j, b) in v.iter().enumerate() {
            text.push_str(&format!("u{i},m{j},{}\n", a * b));
        }
    }
    load_ratings_from_reader(text.as_bytes(), (0.0, 5.0)).unwrap()
}

fn sparse_random(n: usize, m: usize, density: f64, seed: u64) -> RatingsDataset {
    let mut rng = stream_rng(seed, 0);
    let mut text = String::from("user_id,item_id,rating\n");
    for u in 0..n {
        for i in 0..m {
            if rng.random::<f64>() < density {
                text.push_str(&format!("{u},{i},{}\n", rng.random_range(1..=5)));
            }
        }
    }
    load_ratings_from_reader(text.as_bytes(), (0.0, 5.0)).unwrap()
}

#[test]
fn rank_one_fixture_is_recovered() {
    let data = rank_one_fixture();
    let model = factorize(&data, 1, 1e-10, 100, 0).unwrap();
    assert!(model.rmse(&data) <= 1e-6, "rmse {}", model.rmse(&data));
}

#[test]
fn als_improves_on_sparse_data() {
    let data = sparse_random(50, 80, 0.2, 1);
    let model = factorize(&data, 10, 0.1, 20, 2).unwrap();
    let h = &model.rmse_history;
    assert_eq!(h.len(), 20);
    assert!(h[19] < h[0], "{h:?}");
    assert!(model.objective_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)));
}

#[test]
fn als_is_deterministic() {
    let data = sparse_random(20, 30, 0.3, 3);
    assert_eq!(factorize(&data, 4, 0.1, 10, 7).unwrap(), factorize(&data, 4, 0.1, 10, 7).unwrap());
}

#[test]
fn instance_satisfies_environment_invariants() {
    let data = sparse_random(40, 60, 0.3, 4);
    let model = factorize(&data, 5, 0.1, 20, 0).unwrap();
    let inst = build_bandit_instance(&model, (0.0, 5.0), 0.1, 0.5, 15, 9).unwrap();
    assert_eq!(inst.theta.nrows(), 15);
    assert_eq!(inst.graph.n(), 15);
    let env = Environment::new(
        inst.theta.clone(),
        ArmSource::PoolSubset {
            pool: inst.arms.clone(),
            m: 20,
        },
        0.01,
        laplacians(&inst.graph),
    )
    .unwrap();
    env.check_invariants().unwrap();
    assert!(build_bandit_instance(&model, (0.0, 5.0), 0.1, 0.5, 41, 9).is_err());
}

#[test]
fn payoffs_track_normalized_ratings() {
    let data = rank_one_fixture();
    let model = factorize(&data, 1, 1e-10, 100, 0).unwrap();
    let n = data.n_users;
    let inst = build_bandit_instance(&model, (0.0, 5.0), 0.1, 0.5, n, 0).unwrap();
    for &(u, i, r) in &data.observed {
        let payoff = inst.arms.row(i).dot(&inst.theta.row(u));
        let want = inst.payoff_scale * normalize_rating(r, (0.0, 5.0));
        assert!((payoff - want).abs() < 1e-6, "{payoff} vs {want}");
    }
    assert_eq!(normalize_rating(0.0, (0.0, 5.0)), 0.0);
    assert_eq!(normalize_rating(5.0, (0.0, 5.0)), 1.0);
}

#[test]
fn bundle_roundtrip_through_files() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("r.csv");
    std::fs::write(&csv, "user_id,item_id,rating\na,x,1\na,y,4\nb,x,2\nb,y,5\nc,x,3\n").unwrap();
    let data = load_ratings(&csv, (0.0, 5.0)).unwrap();
    assert_eq!(data.user_ids, vec!["a", "b", "c"]);
    let model = factorize(&data, 2, 0.1, 10, 0).unwrap();
    let inst = build_bandit_instance(&model, (0.0, 5.0), 0.1, 0.0, 3, 0).unwrap();
    let out = dir.path().join("bundle");
    write_bundle(&out, &inst).unwrap();
    assert_eq!(read_bundle(&out).unwrap(), inst);
}
