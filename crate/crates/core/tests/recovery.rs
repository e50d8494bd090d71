mod common;

use ternsense::baseline::{dct_basis, ista_solve, random_ternary_projection, BpConfig, Lambda};
use ternsense::imaging::NormalizationStats;
use ternsense::model::Model;
use ternsense::network::NetworkConfig;
use ternsense::numerics::{matmul, DenseMatrix, SeededRng};
use ternsense::persistence::{decode_checkpoint, encode_checkpoint};
use ternsense::training::{train_step, TrainConfig, TrainState};

#[test]
fn one_sparse_dct_signals_are_recovered() {
    let (side, m, trials) = (8, 16, 100);
    let n = side * side;
    let basis = dct_basis(side).unwrap();
    let cfg = BpConfig {
        lambda: Lambda::Relative(0.01),
        max_iters: 5000,
        tol: 1e-12,
    };
    let mut hits = 0;
    for seed in 0..trials {
        let mut rng = SeededRng::new(seed);
        let phi = random_ternary_projection(n, m, &mut rng).unwrap();
        let a = matmul(&phi, false, basis.matrix(), false).unwrap();
        let idx = rng.below(n);
        let mut u = vec![0.0; n];
        u[idx] = rng.uniform_range(1.0, 2.0) * if rng.below(2) == 0 { -1.0 } else { 1.0 };
        let y = ternsense::numerics::dense_matvec(&a, &u).unwrap();
        let got = ista_solve(&a, &y, &cfg).unwrap().u;
        let peak = got.iter().fold(0.0f64, |p, v| p.max(v.abs()));
        let support: Vec<usize> = (0..n).filter(|&i| got[i].abs() > 1e-3 * peak).collect();
        if support == [idx] && got[idx].signum() == u[idx].signum() {
            hits += 1;
        }
    }
    assert!(hits * 10 >= trials * 9, "{hits}/{trials} recovered");
}

#[test]
fn zero_measurements_give_zero_solution() {
    let mut rng = SeededRng::new(3);
    let a = common::random_matrix(5, 9, &mut rng, 1.0);
    let res = ista_solve(&a, &[0.0; 5], &BpConfig::default()).unwrap();
    assert!(res.u.iter().all(|&v| v == 0.0));
}

#[test]
fn reloaded_model_infers_bit_exactly() {
    let cfg = NetworkConfig {
        patch_side: 4,
        sensing_rate: 0.5,
        sparsity_ratio: 0.25,
        hidden_layers: 2,
        hidden_units: 12,
    };
    let train_cfg = TrainConfig {
        batch_size: 8,
        ..TrainConfig::default()
    };
    let mut rng = SeededRng::new(21);
    let model = Model::init(cfg, NormalizationStats::new(0.0, 1.0).unwrap(), &mut rng).unwrap();
    let mut state = TrainState::new(model, &train_cfg);
    for _ in 0..5 {
        let batch = common::random_matrix(8, 16, &mut rng, 1.0);
        train_step(&mut state, &batch, &train_cfg).unwrap();
    }
    state.model.refresh().unwrap();
    let saved = state.model;
    let loaded = decode_checkpoint(&encode_checkpoint(&saved)).unwrap();
    assert_eq!(loaded.projection(), saved.projection());
    assert_eq!(loaded.sensing.alpha(), saved.sensing.alpha());
    let x = common::random_matrix(6, 16, &mut rng, 1.0);
    let bits = |d: DenseMatrix| d.into_vec().into_iter().map(f64::to_bits).collect::<Vec<_>>();
    let before = saved.net.infer_batch(saved.projection(), &x).unwrap();
    let after = loaded.net.infer_batch(loaded.projection(), &x).unwrap();
    assert_eq!(bits(before), bits(after));
    for r in 0..x.rows() {
        let a = saved.net.forward_infer(saved.projection(), x.row(r)).unwrap();
        let b = loaded.net.forward_infer(loaded.projection(), x.row(r)).unwrap();
        assert_eq!(a, b);
    }
}
