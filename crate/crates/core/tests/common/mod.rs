#![allow(dead_code)]

use ternsense::baseline::{ista_solve, objective, BpConfig, Lambda};
use ternsense::imaging::NormalizationStats;
use ternsense::model::Model;
use ternsense::network::{NetworkConfig, ReconstructionNet};
use ternsense::numerics::{densify, DenseMatrix, SeededRng};
use ternsense::projection::{approximation_error, binarize, compute_alpha, top_k_select};
use ternsense::training::{backward, mse_loss, train_step, TrainConfig, TrainState};

pub fn random_matrix(rows: usize, cols: usize, rng: &mut SeededRng, scale: f64) -> DenseMatrix {
    DenseMatrix::from_fn(rows, cols, |_, _| rng.uniform_range(-scale, scale))
}

/// Every trainable slice of the network, in a fixed order.
pub fn param_slices(net: &mut ReconstructionNet) -> Vec<(String, &mut [f64])> {
    let mut out: Vec<(String, &mut [f64])> = Vec::new();
    for (l, h) in net.hidden.iter_mut().enumerate() {
        out.push((format!("hidden.{l}.weight"), h.dense.weights.as_mut_slice()));
        out.push((format!("hidden.{l}.bias"), &mut h.dense.bias));
        out.push((format!("hidden.{l}.gamma"), &mut h.bn.gamma));
        out.push((format!("hidden.{l}.beta"), &mut h.bn.beta));
    }
    out.push(("output.weight".into(), net.output.weights.as_mut_slice()));
    out.push(("output.bias".into(), &mut net.output.bias));
    out
}

#[derive(Debug)]
pub struct GradientReport {
    pub max_rel_error: f64,
    pub worst: String,
    pub checked: usize,
}

/// Relative error with a floor on the denominator. Biases feeding a
/// batch-norm layer have an exactly zero gradient, and their central
/// difference is pure rounding noise of order `ulp(loss) / h`, so a tiny
/// floor would grade the noise rather than the gradient.
pub const REL_ERROR_FLOOR: f64 = 1e-3;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares analytic gradients with central differences for every
/// reconstruction parameter and every entry of the (dense) ternary matrix.
pub fn gradient_check(seed: u64, h: f64) -> GradientReport {
    let cfg = NetworkConfig {
        patch_side: 4,
        sensing_rate: 0.25,
        sparsity_ratio: 0.25,
        hidden_layers: 2,
        hidden_units: 8,
    };
    let mut rng = SeededRng::new(seed);
    let mut model = Model::init(cfg, NormalizationStats::new(0.0, 1.0).unwrap(), &mut rng).unwrap();
    model.refresh().unwrap();
    // Randomize the affine batch-norm parameters so the oracle does not
    // only see the identity initialization.
    for h_layer in &mut model.net.hidden {
        for g in &mut h_layer.bn.gamma {
            *g = rng.uniform_range(0.5, 1.5);
        }
        for b in &mut h_layer.bn.beta {
            *b = rng.uniform_range(-0.5, 0.5);
        }
    }
    let x = random_matrix(4, cfg.n(), &mut rng, 1.5);
    let dense_sb = densify(model.sensing.theta_sb());

    let mut net = model.net.clone();
    let (_, cache) = net.forward_train(model.sensing.theta_sb(), &x).unwrap();
    let grads = backward(&model.net, &cache, &x).unwrap();

    let loss = |net: &ReconstructionNet, op: &DenseMatrix| -> f64 {
        let mut net = net.clone();
        let (xhat, _) = net.forward_train(op, &x).unwrap();
        mse_loss(&x, &xhat).unwrap()
    };

    let mut analytic: Vec<Vec<f64>> = Vec::new();
    for g in &grads.hidden {
        analytic.push(g.weights.as_slice().to_vec());
        analytic.push(g.bias.clone());
        analytic.push(g.gamma.clone());
        analytic.push(g.beta.clone());
    }
    analytic.push(grads.output_weights.as_slice().to_vec());
    analytic.push(grads.output_bias.clone());

    let mut report = GradientReport {
        max_rel_error: 0.0,
        worst: String::new(),
        checked: 0,
    };
    let record = |name: String, a: f64, f: f64, report: &mut GradientReport| {
        let e = rel_error(a, f);
        report.checked += 1;
        if e > report.max_rel_error {
            report.max_rel_error = e;
            report.worst = format!("{name}: analytic {a:e}, numeric {f:e}");
        }
    };

    let base = model.net.clone();
    let group_count = analytic.len();
    for g in 0..group_count {
        for i in 0..analytic[g].len() {
            let mut plus = base.clone();
            let name = {
                let mut slices = param_slices(&mut plus);
                slices[g].1[i] += h;
                slices[g].0.clone()
            };
            let mut minus = base.clone();
            param_slices(&mut minus)[g].1[i] -= h;
            let f = (loss(&plus, &dense_sb) - loss(&minus, &dense_sb)) / (2.0 * h);
            record(format!("{name}[{i}]"), analytic[g][i], f, &mut report);
        }
    }
    for r in 0..dense_sb.rows() {
        for c in 0..dense_sb.cols() {
            let mut plus = dense_sb.clone();
            plus.set(r, c, plus.get(r, c) + h);
            let mut minus = dense_sb.clone();
            minus.set(r, c, minus.get(r, c) - h);
            let f = (loss(&base, &plus) - loss(&base, &minus)) / (2.0 * h);
            record(format!("theta_sb[{r},{c}]"), grads.theta_sb.get(r, c), f, &mut report);
        }
    }
    report
}

/// Result of comparing the closed-form binarization with exhaustive search.
#[derive(Debug)]
pub struct OptimalityReport {
    pub gap: f64,
    pub cases: usize,
}

/// Exhaustive minimum of `||theta - a s||^2` over sign patterns `s` on
/// `support` and the best real scale `a` for each pattern.
pub fn brute_force_min_error(theta: &[f64], support: &[usize]) -> f64 {
    let k = support.len();
    let off: f64 = theta
        .iter()
        .enumerate()
        .filter(|(i, _)| !support.contains(i))
        .map(|(_, v)| v * v)
        .sum();
    let mut best = f64::INFINITY;
    for pattern in 0u32..(1 << k) {
        let s: Vec<f64> = (0..k).map(|b| if pattern >> b & 1 == 1 { 1.0 } else { -1.0 }).collect();
        let a = support.iter().zip(&s).map(|(&i, si)| theta[i] * si).sum::<f64>() / k as f64;
        let on: f64 = support.iter().zip(&s).map(|(&i, si)| (theta[i] - a * si).powi(2)).sum();
        best = best.min(on + off);
    }
    best
}

/// Draws `cases` random columns with `n <= 6` and checks the closed-form
/// sign/scale pair against exhaustive search on the selected support.
pub fn optimality_check(cases: usize, seed: u64) -> OptimalityReport {
    let mut rng = SeededRng::new(seed);
    let mut gap: f64 = 0.0;
    for _ in 0..cases {
        let n = 1 + rng.below(6);
        let k = 1 + rng.below(n);
        let theta = random_matrix(n, 1, &mut rng, 2.0);
        let mask = top_k_select(&theta, k).unwrap();
        let sb = binarize(&theta, &mask).unwrap();
        let col = theta.column(0);
        let theta_s: Vec<f64> = (0..n).map(|i| if mask.contains(i, 0) { col[i] } else { 0.0 }).collect();
        let alpha = compute_alpha(&theta_s, k).unwrap();
        let sb_col = densify(&sb).column(0);
        let e = approximation_error(&col, &sb_col, alpha).unwrap();
        let best = brute_force_min_error(&col, mask.column(0));
        gap = gap.max((e - best).abs());
    }
    OptimalityReport { gap, cases }
}

/// Toy joint training. Returns the worst violation of the projection
/// invariants seen after any step, with a description.
pub fn projection_invariant_run(steps: usize, seed: u64) -> (usize, f64, Vec<String>) {
    let cfg = NetworkConfig {
        patch_side: 8,
        sensing_rate: 0.25,
        sparsity_ratio: 0.125,
        hidden_layers: 2,
        hidden_units: 32,
    };
    assert_eq!((cfg.n(), cfg.m(), cfg.k()), (64, 16, 8));
    let train_cfg = TrainConfig {
        batch_size: 16,
        ..TrainConfig::default()
    };
    let mut rng = SeededRng::new(seed);
    let model = Model::init(cfg, NormalizationStats::new(0.0, 1.0).unwrap(), &mut rng).unwrap();
    let mut state = TrainState::new(model, &train_cfg);
    let mut problems = Vec::new();
    let mut worst_alpha: f64 = 0.0;
    for step in 0..steps {
        let batch = random_matrix(16, cfg.n(), &mut rng, 1.0);
        train_step(&mut state, &batch, &train_cfg).unwrap();
        // The step leaves the projection derived from the pre-update
        // weights; refresh to inspect the invariants of the new weights.
        state.model.refresh().unwrap();
        let sensing = &state.model.sensing;
        let t = sensing.theta_sb();
        for j in 0..t.m() {
            let entries: Vec<_> = t.column(j).collect();
            if entries.len() != cfg.k() {
                problems.push(format!("step {step}, column {j}: {} nonzeros", entries.len()));
            }
            let support: Vec<usize> = entries.iter().map(|e| e.0).collect();
            if support.as_slice() != sensing.mask().column(j) {
                problems.push(format!("step {step}, column {j}: support differs from mask"));
            }
            let theta_col = sensing.theta().column(j);
            for &(i, s) in &entries {
                let expect = if theta_col[i] < 0.0 { -1.0 } else { 1.0 };
                if s.value() != expect {
                    problems.push(format!("step {step}, column {j}: sign of row {i}"));
                }
            }
            let l1: f64 = support.iter().map(|&i| theta_col[i].abs()).sum();
            worst_alpha = worst_alpha.max((sensing.alpha()[j] - l1 / cfg.k() as f64).abs());
            // independent top-K check: no unselected entry beats a selected one
            let min_in = support.iter().map(|&i| theta_col[i].abs()).fold(f64::INFINITY, f64::min);
            let max_out = (0..cfg.n())
                .filter(|i| !support.contains(i))
                .map(|i| theta_col[i].abs())
                .fold(0.0, f64::max);
            if max_out > min_in {
                problems.push(format!("step {step}, column {j}: support is not top-K"));
            }
        }
        if state.model.net.scaling.alpha != sensing.alpha() {
            problems.push(format!("step {step}: scaling layer out of sync"));
        }
    }
    (steps, worst_alpha, problems)
}

#[derive(Debug, Default)]
pub struct IstaReport {
    pub worst_increase: f64,
    pub identity_error: f64,
    pub worst_subgradient: f64,
    pub instances: usize,
}

/// Largest violation of the l1 optimality conditions at `u`:
/// `(A^T (y - A u))_i = lambda sign(u_i)` on the support and
/// `|(A^T (y - A u))_i| <= lambda` off it.
pub fn subgradient_violation(a: &DenseMatrix, y: &[f64], u: &[f64], lambda: f64) -> f64 {
    let mut worst: f64 = 0.0;
    for i in 0..a.cols() {
        let mut corr = 0.0;
        for r in 0..a.rows() {
            let au: f64 = (0..a.cols()).map(|c| a.get(r, c) * u[c]).sum();
            corr += a.get(r, i) * (y[r] - au);
        }
        let v = if u[i] != 0.0 {
            (corr - lambda * u[i].signum()).abs()
        } else {
            (corr.abs() - lambda).max(0.0)
        };
        worst = worst.max(v);
    }
    worst
}

pub fn ista_checks(instances: usize, seed: u64) -> IstaReport {
    let mut rng = SeededRng::new(seed);
    let mut report = IstaReport {
        instances,
        ..Default::default()
    };
    for _ in 0..instances {
        let m = 3 + rng.below(6);
        let n = m + rng.below(8);
        let a = random_matrix(m, n, &mut rng, 1.0);
        let y: Vec<f64> = (0..m).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let cfg = BpConfig {
            lambda: Lambda::Relative(0.1),
            max_iters: 20_000,
            tol: 1e-15,
        };
        let res = ista_solve(&a, &y, &cfg).unwrap();
        for w in res.objective.windows(2) {
            report.worst_increase = report.worst_increase.max(w[1] - w[0]);
        }
        let direct = objective(&a, &y, &res.u, res.lambda).unwrap();
        assert!((direct - res.objective.last().unwrap()).abs() < 1e-9);
        report.worst_subgradient = report
            .worst_subgradient
            .max(subgradient_violation(&a, &y, &res.u, res.lambda));

        // with A = I the minimizer is the soft-thresholded measurement
        let eye = DenseMatrix::identity(n);
        let yi: Vec<f64> = (0..n).map(|_| rng.uniform_range(-2.0, 2.0)).collect();
        let lam = rng.uniform_range(0.05, 1.0);
        let cfg = BpConfig {
            lambda: Lambda::Fixed(lam),
            max_iters: 50,
            tol: 1e-15,
        };
        let res = ista_solve(&eye, &yi, &cfg).unwrap();
        for (u, v) in res.u.iter().zip(&yi) {
            let closed = if v.abs() > lam { v - lam * v.signum() } else { 0.0 };
            report.identity_error = report.identity_error.max((u - closed).abs());
        }
    }
    report
}
