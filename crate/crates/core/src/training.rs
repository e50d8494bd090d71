//! Joint training of the sensing weights and the reconstruction network.
//!
//! Each step re-derives the ternary projection from the continuous weights,
//! runs forward and backward with the ternary matrix in place, and then
//! applies Adam. The gradient with respect to the ternary matrix updates the
//! continuous weights directly (straight-through, no clipping, no masking).

use std::fmt;

use crate::error::{arg_err, dim_err, Result};
use crate::imaging::{normalize, sample_random_patches, GrayImage, NormalizationStats};
use crate::model::Model;
use crate::network::{ForwardCache, NetworkConfig, ReconstructionNet};
use crate::numerics::{gemm, matmul, DenseMatrix, SeededRng};
use crate::projection::SensingWeights;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Weight of `sum ||W||^2` over the reconstruction dense layers.
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 50,
            batch_size: 5000,
            base_lr: 0.01,
            lr_decay_factor: 0.6,
            lr_decay_every: 5,
            weight_decay: 0.001,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(arg_err("batch size must be at least 2"));
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(arg_err("learning rate must be positive"));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) {
            return Err(arg_err("decay factor must lie in (0, 1]"));
        }
        if self.lr_decay_every == 0 {
            return Err(arg_err("decay interval must be at least one epoch"));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(arg_err("l2 weight must be nonnegative"));
        }
        Ok(())
    }
}

/// `base_lr * factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.base_lr * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Per-sample squared error summed over the vector, averaged over samples.
pub fn mse_loss(x: &DenseMatrix, xhat: &DenseMatrix) -> Result<f64> {
    if x.shape() != xhat.shape() {
        return Err(dim_err(format!(
            "targets are {:?}, reconstructions are {:?}",
            x.shape(),
            xhat.shape()
        )));
    }
    if x.rows() == 0 {
        return Err(arg_err("empty batch"));
    }
    let sq: f64 = x
        .as_slice()
        .iter()
        .zip(xhat.as_slice())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(sq / x.rows() as f64)
}

/// Adam moments for one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            first_moment: vec![0.0; len],
            second_moment: vec![0.0; len],
            beta1: ADAM_BETA1,
            beta2: ADAM_BETA2,
            epsilon: ADAM_EPSILON,
            step: 0,
        }
    }
}

/// One bias-corrected Adam step. `weight_decay > 0` adds `2 * weight_decay *
/// param` to the gradient before the moments see it.
pub fn adam_update(
    param: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != state.first_moment.len() {
        return Err(dim_err(format!(
            "adam: parameter {}, gradient {}, state {}",
            param.len(),
            grad.len(),
            state.first_moment.len()
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (((p, &g), m), v) in param
        .iter_mut()
        .zip(grad)
        .zip(&mut state.first_moment)
        .zip(&mut state.second_moment)
    {
        let g = g + 2.0 * weight_decay * *p;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= lr * m_hat / (v_hat.sqrt() + state.epsilon);
    }
    Ok(())
}

/// Applies the gradient taken with respect to the ternary projection to the
/// continuous weights, on every entry. The caches stay stale until the next
/// refresh.
pub fn straight_through_update(
    sensing: &mut SensingWeights,
    grad_theta_sb: &DenseMatrix,
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if grad_theta_sb.shape() != sensing.theta().shape() {
        return Err(dim_err(format!(
            "gradient is {:?}, sensing weights are {:?}",
            grad_theta_sb.shape(),
            sensing.theta().shape()
        )));
    }
    adam_update(
        sensing.theta_mut().as_mut_slice(),
        grad_theta_sb.as_slice(),
        state,
        lr,
        0.0,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGradients {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

/// Gradients of the reconstruction loss. There is no entry for the scales:
/// they are not trained.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    /// `n x m`, dense even off the support.
    pub theta_sb: DenseMatrix,
    pub hidden: Vec<LayerGradients>,
    pub output_weights: DenseMatrix,
    pub output_bias: Vec<f64>,
}

fn column_sums(m: &DenseMatrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in out.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    out
}

/// Reverse-mode gradients of [`mse_loss`] for the batch that produced
/// `cache`, including the batch-statistics path of every batch-norm layer.
pub fn backward(net: &ReconstructionNet, cache: &ForwardCache, x_batch: &DenseMatrix) -> Result<Gradients> {
    cache.check_batch(x_batch)?;
    let rows = x_batch.rows();
    let inv_b = 1.0 / rows as f64;

    let mut delta = cache.output.clone();
    for (d, x) in delta.as_mut_slice().iter_mut().zip(x_batch.as_slice()) {
        *d = 2.0 * inv_b * (*d - x);
    }
    let last_act = cache.activations.last().expect("output input is cached");
    let output_weights = matmul(last_act, true, &delta, false)?;
    let output_bias = column_sums(&delta);
    let mut upstream = matmul(&delta, false, &net.output.weights, true)?;

    let mut hidden = Vec::with_capacity(net.hidden.len());
    for (l, layer) in net.hidden.iter().enumerate().rev() {
        let lc = &cache.layers[l];
        let activated = &cache.activations[l + 1];
        let units = layer.bn.units();
        // through ReLU
        for (d, a) in upstream.as_mut_slice().iter_mut().zip(activated.as_slice()) {
            if *a <= 0.0 {
                *d = 0.0;
            }
        }
        let mut gamma = vec![0.0; units];
        let beta = column_sums(&upstream);
        for r in 0..rows {
            for ((g, d), xh) in gamma.iter_mut().zip(upstream.row(r)).zip(lc.normalized.row(r)) {
                *g += d * xh;
            }
        }
        // d xhat = d y * gamma; then through the batch statistics
        let mut sum_dxhat = vec![0.0; units];
        let mut sum_dxhat_xhat = vec![0.0; units];
        for r in 0..rows {
            let row = upstream.row_mut(r);
            for (u, d) in row.iter_mut().enumerate() {
                *d *= layer.bn.gamma[u];
                sum_dxhat[u] += *d;
                sum_dxhat_xhat[u] += *d * lc.normalized.row(r)[u];
            }
        }
        let mut dz = upstream;
        for r in 0..rows {
            let xhat = lc.normalized.row(r);
            for (u, d) in dz.row_mut(r).iter_mut().enumerate() {
                *d = lc.inv_std[u]
                    * (*d - inv_b * sum_dxhat[u] - inv_b * xhat[u] * sum_dxhat_xhat[u]);
            }
        }
        let weights = matmul(&cache.activations[l], true, &dz, false)?;
        let bias = column_sums(&dz);
        upstream = matmul(&dz, false, &layer.dense.weights, true)?;
        hidden.push(LayerGradients {
            weights,
            bias,
            gamma,
            beta,
        });
    }
    hidden.reverse();

    // through the fixed scales, then the linear sensing map
    for r in 0..rows {
        for (d, a) in upstream.row_mut(r).iter_mut().zip(&net.scaling.alpha) {
            *d *= a;
        }
    }
    let mut theta_sb = DenseMatrix::zeros(x_batch.cols(), upstream.cols());
    gemm(x_batch, true, &upstream, false, 0.0, &mut theta_sb)?;

    Ok(Gradients {
        theta_sb,
        hidden,
        output_weights,
        output_bias,
    })
}

#[derive(Debug, Clone, PartialEq)]
struct LayerMoments {
    weights: AdamState,
    bias: AdamState,
    gamma: AdamState,
    beta: AdamState,
}

/// Adam state for every trainable tensor. The scales and the ternary
/// projection have none.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelMoments {
    theta: AdamState,
    hidden: Vec<LayerMoments>,
    output_weights: AdamState,
    output_bias: AdamState,
}

impl ModelMoments {
    pub fn for_model(model: &Model) -> Self {
        let net = &model.net;
        Self {
            theta: AdamState::new(model.sensing.theta().as_slice().len()),
            hidden: net
                .hidden
                .iter()
                .map(|h| LayerMoments {
                    weights: AdamState::new(h.dense.weights.as_slice().len()),
                    bias: AdamState::new(h.dense.bias.len()),
                    gamma: AdamState::new(h.bn.units()),
                    beta: AdamState::new(h.bn.units()),
                })
                .collect(),
            output_weights: AdamState::new(net.output.weights.as_slice().len()),
            output_bias: AdamState::new(net.output.bias.len()),
        }
    }

    pub fn step(&self) -> u64 {
        self.theta.step
    }
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: Model,
    pub moments: ModelMoments,
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub rng: SeededRng,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Self {
        let moments = ModelMoments::for_model(&model);
        Self {
            model,
            moments,
            epoch: 0,
            step: 0,
            lr: lr_at(0, cfg),
            rng: SeededRng::new(cfg.seed),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    /// Reconstruction loss alone.
    pub mse: f64,
    /// `weight_decay * sum ||W||^2`.
    pub penalty: f64,
}

impl StepReport {
    pub fn loss(&self) -> f64 {
        self.mse + self.penalty
    }
}

/// One iteration: refresh the projection, forward, backward, update.
pub fn train_step(state: &mut TrainState, batch: &DenseMatrix, cfg: &TrainConfig) -> Result<StepReport> {
    state.model.refresh()?;
    let Model { sensing, net, .. } = &mut state.model;
    let (xhat, cache) = net.forward_train(sensing.theta_sb(), batch)?;
    let mse = mse_loss(batch, &xhat)?;
    let penalty = cfg.weight_decay * net.weight_norm_sq();
    let grads = backward(net, &cache, batch)?;

    let lr = state.lr;
    let lambda = cfg.weight_decay;
    let moments = &mut state.moments;
    for ((layer, g), mom) in net.hidden.iter_mut().zip(&grads.hidden).zip(&mut moments.hidden) {
        adam_update(layer.dense.weights.as_mut_slice(), g.weights.as_slice(), &mut mom.weights, lr, lambda)?;
        adam_update(&mut layer.dense.bias, &g.bias, &mut mom.bias, lr, 0.0)?;
        adam_update(&mut layer.bn.gamma, &g.gamma, &mut mom.gamma, lr, 0.0)?;
        adam_update(&mut layer.bn.beta, &g.beta, &mut mom.beta, lr, 0.0)?;
    }
    adam_update(
        net.output.weights.as_mut_slice(),
        grads.output_weights.as_slice(),
        &mut moments.output_weights,
        lr,
        lambda,
    )?;
    adam_update(&mut net.output.bias, &grads.output_bias, &mut moments.output_bias, lr, 0.0)?;
    straight_through_update(sensing, &grads.theta_sb, &mut moments.theta, lr)?;

    state.step += 1;
    Ok(StepReport { mse, penalty })
}

/// One line of the loss log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl fmt::Display for StepLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{},{}", self.epoch, self.step, self.loss, self.lr)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_mse: f64,
    pub lr: f64,
}

/// Sample order for one epoch: a seeded permutation of `0..len`.
pub fn epoch_order(rng: &mut SeededRng, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    rng.shuffle(&mut order);
    order
}

/// Splits an epoch order into mini-batches, dropping a trailing batch that
/// is too small for batch statistics.
pub fn batches(order: &[usize], batch_size: usize) -> impl Iterator<Item = &[usize]> {
    order.chunks(batch_size).filter(|c| c.len() >= 2)
}

/// Runs `cfg.epochs` epochs over shuffled mini-batches of `dataset` (one
/// normalized patch per row), calling `on_step` after every step.
///
/// Ends with a refresh, so the model's projection and scales reflect the
/// final continuous weights.
pub fn train(
    state: &mut TrainState,
    dataset: &DenseMatrix,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if dataset.rows() < 2 {
        return Err(arg_err(format!(
            "training needs at least 2 patches, got {}",
            dataset.rows()
        )));
    }
    if dataset.cols() != state.model.config.n() {
        return Err(dim_err(format!(
            "patches have {} values, model expects {}",
            dataset.cols(),
            state.model.config.n()
        )));
    }
    let mut log = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let epoch = state.epoch;
        state.lr = lr_at(epoch, cfg);
        let order = epoch_order(&mut state.rng, dataset.rows());
        let (mut sum_loss, mut sum_mse, mut steps) = (0.0, 0.0, 0usize);
        for idx in batches(&order, cfg.batch_size) {
            let batch = dataset.select_rows(idx);
            let report = train_step(state, &batch, cfg)?;
            sum_loss += report.loss();
            sum_mse += report.mse;
            steps += 1;
            on_step(&StepLog {
                epoch,
                step: state.step,
                loss: report.loss(),
                lr: state.lr,
            });
        }
        log.push(EpochLog {
            epoch,
            steps,
            mean_loss: sum_loss / steps.max(1) as f64,
            mean_mse: sum_mse / steps.max(1) as f64,
            lr: state.lr,
        });
        state.epoch += 1;
    }
    if cfg.epochs > 0 {
        state.model.refresh()?;
    }
    Ok(log)
}

/// Samples `patch_count` random windows from `images`, derives the
/// normalization statistics from them, initializes a model and trains it.
///
/// One generator seeded with `cfg.seed` drives sampling and then
/// initialization, so runs that differ only in network shape see the same
/// patches.
pub fn train_on_images(
    images: &[GrayImage],
    net_cfg: NetworkConfig,
    patch_count: usize,
    cfg: &TrainConfig,
    on_step: impl FnMut(&StepLog),
) -> Result<(Model, Vec<EpochLog>)> {
    net_cfg.validate()?;
    cfg.validate()?;
    let mut rng = SeededRng::new(cfg.seed);
    let (patches, _) = sample_random_patches(images, net_cfg.patch_side, patch_count, &mut rng)?;
    let stats = NormalizationStats::from_data(&patches.vectors)?;
    let dataset = normalize(&patches.vectors, &stats);
    drop(patches);
    let model = Model::init(net_cfg, stats, &mut rng)?;
    let mut state = TrainState::new(model, cfg);
    let log = train(&mut state, &dataset, cfg, on_step)?;
    Ok((state.model, log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::NormalizationStats;
    use crate::network::NetworkConfig;
    use crate::numerics::Sign;

    fn tiny_model(seed: u64) -> Model {
        let cfg = NetworkConfig {
            patch_side: 4,
            sensing_rate: 0.25,
            sparsity_ratio: 0.25,
            hidden_layers: 2,
            hidden_units: 8,
        };
        Model::init(cfg, NormalizationStats::new(0.0, 1.0).unwrap(), &mut SeededRng::new(seed)).unwrap()
    }

    fn random_batch(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = SeededRng::new(seed);
        DenseMatrix::from_fn(rows, cols, |_, _| rng.uniform_range(-1.5, 1.5))
    }

    #[test]
    fn mse_loss_examples() {
        let x = random_batch(3, 4, 1);
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);

        let a = DenseMatrix::from_vec(1, 2, vec![1.0, 1.0]).unwrap();
        let b = DenseMatrix::zeros(1, 2);
        assert_eq!(mse_loss(&a, &b).unwrap(), 2.0);

        let y = random_batch(3, 4, 2);
        let doubled_x = x.select_rows(&[0, 1, 2, 0, 1, 2]);
        let doubled_y = y.select_rows(&[0, 1, 2, 0, 1, 2]);
        let l1 = mse_loss(&x, &y).unwrap();
        let l2 = mse_loss(&doubled_x, &doubled_y).unwrap();
        assert!((l1 - l2).abs() < 1e-12);

        assert!(mse_loss(&a, &DenseMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.01);
        assert!((lr_at(5, &cfg) - 0.006).abs() < 1e-15);
        assert!((lr_at(4, &cfg) - 0.01).abs() < 1e-15);
        assert!((lr_at(10, &cfg) - 0.0036).abs() < 1e-15);
        let flat = TrainConfig { lr_decay_factor: 1.0, ..cfg };
        assert_eq!(lr_at(37, &flat), 0.01);
    }

    #[test]
    fn adam_examples() {
        let mut p = vec![1.0, -2.0, 3.0];
        let mut s = AdamState::new(3);
        adam_update(&mut p, &[0.5, -1.0, 2.0], &mut s, 0.0, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0, 3.0]);

        // at t = 1 the bias corrections cancel: step = -lr * g / (|g| + eps)
        let mut p = vec![0.0, 0.0, 0.0];
        let mut s = AdamState::new(3);
        s.epsilon = 0.0;
        adam_update(&mut p, &[0.5, -1e-3, 7.0], &mut s, 0.1, 0.0).unwrap();
        for (v, want) in p.iter().zip([-0.1, 0.1, -0.1]) {
            assert!((v - want).abs() < 1e-12, "{v}");
        }

        let mut p = vec![0.3, -0.7];
        let mut s = AdamState::new(2);
        for _ in 0..10 {
            adam_update(&mut p, &[0.0, 0.0], &mut s, 0.01, 0.0).unwrap();
        }
        assert_eq!(p, vec![0.3, -0.7]);

        // weight decay alone pulls weights toward zero
        let mut p = vec![0.3, -0.7];
        let mut s = AdamState::new(2);
        adam_update(&mut p, &[0.0, 0.0], &mut s, 0.01, 0.5).unwrap();
        assert!(p[0] < 0.3 && p[1] > -0.7);

        assert!(adam_update(&mut p, &[0.0], &mut s, 0.01, 0.0).is_err());
    }

    #[test]
    fn straight_through_examples() {
        let theta = DenseMatrix::from_vec(2, 1, vec![1.0, 0.5]).unwrap();
        let mut w = SensingWeights::new(theta.clone(), 1).unwrap();
        let mut s = AdamState::new(2);
        straight_through_update(&mut w, &DenseMatrix::zeros(2, 1), &mut s, 0.1).unwrap();
        assert_eq!(w.theta(), &theta);
        let g = DenseMatrix::from_vec(2, 1, vec![1.0, -1.0]).unwrap();
        straight_through_update(&mut w, &g, &mut AdamState::new(2), 0.0).unwrap();
        assert_eq!(w.theta(), &theta);

        // row 1 is off the support but its persistent gradient moves it in
        let mut s = AdamState::new(2);
        assert_eq!(w.mask().column(0), &[0]);
        let g = DenseMatrix::from_vec(2, 1, vec![0.0, -1.0]).unwrap();
        for _ in 0..2 {
            w.refresh().unwrap();
            straight_through_update(&mut w, &g, &mut s, 0.3).unwrap();
        }
        w.refresh().unwrap();
        assert!(w.theta().get(1, 0) > 1.0);
        assert_eq!(w.mask().column(0), &[1]);
        assert_eq!(w.theta_sb().column(0).next(), Some((1, Sign::Plus)));
    }

    #[test]
    fn zero_input_gives_zero_sensing_gradient() {
        let mut model = tiny_model(3);
        let x = DenseMatrix::zeros(4, 16);
        let (_, cache) = model.net.forward_train(model.sensing.theta_sb(), &x).unwrap();
        let g = backward(&model.net, &cache, &x).unwrap();
        assert!(g.theta_sb.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn backward_rejects_stale_cache() {
        let mut model = tiny_model(4);
        let x = random_batch(4, 16, 5);
        let other = random_batch(4, 16, 6);
        let (_, cache) = model.net.forward_train(model.sensing.theta_sb(), &x).unwrap();
        assert!(matches!(
            backward(&model.net, &cache, &other),
            Err(crate::Error::StaleCache(_))
        ));
    }

    #[test]
    fn steps_keep_k_nonzeros_and_are_deterministic() {
        let data = random_batch(40, 16, 7);
        let cfg = TrainConfig { batch_size: 8, weight_decay: 0.001, ..Default::default() };
        let run = || {
            let mut st = TrainState::new(tiny_model(9), &cfg);
            let mut losses = Vec::new();
            for i in 0..12 {
                let idx: Vec<usize> = (0..8).map(|j| (i * 8 + j) % 40).collect();
                let r = train_step(&mut st, &data.select_rows(&idx), &cfg).unwrap();
                losses.push(r.loss().to_bits());
                for j in 0..st.model.sensing.m() {
                    assert_eq!(st.model.sensing.theta_sb().column(j).count(), st.model.sensing.k());
                }
            }
            losses
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn training_reduces_loss_on_toy_problem() {
        let data = random_batch(50, 16, 11);
        let cfg = TrainConfig { batch_size: 50, weight_decay: 0.0, ..Default::default() };
        let mut st = TrainState::new(tiny_model(12), &cfg);
        let first = train_step(&mut st, &data, &cfg).unwrap().loss();
        let mut last = first;
        for _ in 1..200 {
            last = train_step(&mut st, &data, &cfg).unwrap().loss();
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn plain_gradient_steps_descend_with_fixed_projection() {
        let mut model = tiny_model(21);
        let x = random_batch(6, 16, 22);
        let op = model.sensing.theta_sb().clone();
        let mu = 1e-3;
        let mut prev = f64::INFINITY;
        for _ in 0..30 {
            let (xhat, cache) = model.net.forward_train(&op, &x).unwrap();
            let loss = mse_loss(&x, &xhat).unwrap();
            assert!(loss <= prev + 1e-12, "{prev} -> {loss}");
            prev = loss;
            let g = backward(&model.net, &cache, &x).unwrap();
            for (layer, lg) in model.net.hidden.iter_mut().zip(&g.hidden) {
                sgd(layer.dense.weights.as_mut_slice(), lg.weights.as_slice(), mu);
                sgd(&mut layer.dense.bias, &lg.bias, mu);
                sgd(&mut layer.bn.gamma, &lg.gamma, mu);
                sgd(&mut layer.bn.beta, &lg.beta, mu);
            }
            sgd(model.net.output.weights.as_mut_slice(), g.output_weights.as_slice(), mu);
            sgd(&mut model.net.output.bias, &g.output_bias, mu);
        }
    }

    fn sgd(p: &mut [f64], g: &[f64], mu: f64) {
        for (p, g) in p.iter_mut().zip(g) {
            *p -= mu * g;
        }
    }

    #[test]
    fn train_loop_contracts() {
        let data = random_batch(21, 16, 13);
        let cfg = TrainConfig { epochs: 0, batch_size: 4, ..Default::default() };
        let mut st = TrainState::new(tiny_model(14), &cfg);
        let before = st.model.clone();
        let log = train(&mut st, &data, &cfg, |_| {}).unwrap();
        assert!(log.is_empty());
        assert_eq!(st.model.sensing.theta(), before.sensing.theta());
        assert_eq!(st.model.net, before.net);

        // 21 rows in batches of 4: five full batches plus a dropped single
        let cfg = TrainConfig { epochs: 2, ..cfg };
        let mut lines = Vec::new();
        let log = train(&mut st, &data, &cfg, |l| lines.push(l.to_string())).unwrap();
        assert_eq!(log.len(), 2);
        assert_eq!(log[0].steps, 5);
        assert_eq!(lines.len(), 10);
        assert!(lines[0].starts_with("0,1,"));
        assert_eq!(lines[9].split(',').count(), 4);
        assert_eq!(st.model.net.scaling.alpha, st.model.sensing.alpha());

        assert!(train(&mut st, &DenseMatrix::zeros(1, 16), &cfg, |_| {}).is_err());
    }

    #[test]
    fn batches_follow_seeded_order() {
        let a = epoch_order(&mut SeededRng::new(5), 100);
        let b = epoch_order(&mut SeededRng::new(5), 100);
        assert_eq!(a, b);
        let mut sorted = a.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, (0..100).collect::<Vec<_>>());
        let sizes: Vec<usize> = batches(&a, 33).map(<[usize]>::len).collect();
        assert_eq!(sizes, vec![33, 33, 33]);
        let sizes: Vec<usize> = batches(&a[..35], 33).map(<[usize]>::len).collect();
        assert_eq!(sizes, vec![33, 2]);
    }
}
