//! Sensing layer, scaling layer and the nonlinear reconstruction network.
//!
//! Shape chain: `n -> m` (ternary sensing, no bias, no activation),
//! `m -> m` (per-measurement scale), `m -> H` repeated `L` times
//! (dense, batch norm, ReLU), `H -> n` (dense, linear).

use crate::error::{arg_err, dim_err, Error, Result};
use crate::numerics::{matmul, DenseMatrix, SeededRng, SparseTernaryMatrix};

pub const BN_EPSILON: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetworkConfig {
    pub patch_side: usize,
    pub sensing_rate: f64,
    pub sparsity_ratio: f64,
    pub hidden_layers: usize,
    pub hidden_units: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            patch_side: 32,
            sensing_rate: 0.25,
            sparsity_ratio: 0.05,
            hidden_layers: 2,
            hidden_units: 2048,
        }
    }
}

impl NetworkConfig {
    /// Input dimension `S^2`.
    pub fn n(&self) -> usize {
        self.patch_side * self.patch_side
    }

    /// Number of measurements, `round(S^2 R)`.
    pub fn m(&self) -> usize {
        (self.n() as f64 * self.sensing_rate).round() as usize
    }

    /// Nonzeros per projection column, `round(S^2 gamma)` clamped to at
    /// least one.
    pub fn k(&self) -> usize {
        ((self.n() as f64 * self.sparsity_ratio).round() as usize).max(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_side == 0 {
            return Err(arg_err("patch side must be positive"));
        }
        if !(self.sensing_rate > 0.0 && self.sensing_rate < 1.0) {
            return Err(arg_err(format!(
                "sensing rate {} outside (0, 1)",
                self.sensing_rate
            )));
        }
        if !(self.sparsity_ratio > 0.0 && self.sparsity_ratio <= 1.0) {
            return Err(arg_err(format!(
                "sparsity ratio {} outside (0, 1]",
                self.sparsity_ratio
            )));
        }
        let (n, m, k) = (self.n(), self.m(), self.k());
        if m < 1 || m >= n {
            return Err(arg_err(format!("need 1 <= m < n, got m = {m}, n = {n}")));
        }
        if k > n {
            return Err(arg_err(format!("need k <= n, got k = {k}, n = {n}")));
        }
        if self.hidden_layers == 0 || self.hidden_units == 0 {
            return Err(arg_err("need at least one hidden layer with one unit"));
        }
        Ok(())
    }
}

/// Anything that maps a `B x n` batch to `B x m` measurements linearly.
///
/// The deployed operator is the ternary matrix; the dense impl exists so
/// that the sensing weights can be perturbed as continuous values.
pub trait SensingOperator {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn sense_batch(&self, batch: &DenseMatrix) -> Result<DenseMatrix>;
}

impl SensingOperator for SparseTernaryMatrix {
    fn input_dim(&self) -> usize {
        self.n()
    }

    fn output_dim(&self) -> usize {
        self.m()
    }

    fn sense_batch(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        SparseTernaryMatrix::sense_batch(self, batch)
    }
}

/// An `n x m` dense projection; measurements are `x^T D`.
impl SensingOperator for DenseMatrix {
    fn input_dim(&self) -> usize {
        self.rows()
    }

    fn output_dim(&self) -> usize {
        self.cols()
    }

    fn sense_batch(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        matmul(batch, false, self, false)
    }
}

/// Measurements `theta_sb^T x` of a single patch.
pub fn sense(theta_sb: &SparseTernaryMatrix, x: &[f64]) -> Result<Vec<f64>> {
    theta_sb.ternary_matvec(x)
}

/// Elementwise `alpha_j * y_j`.
pub fn scale(alpha: &[f64], y: &[f64]) -> Result<Vec<f64>> {
    if alpha.len() != y.len() {
        return Err(dim_err(format!(
            "{} scale factors for {} measurements",
            alpha.len(),
            y.len()
        )));
    }
    Ok(alpha.iter().zip(y).map(|(a, v)| a * v).collect())
}

/// Per-measurement scales. Not trained by gradient descent; overwritten
/// from the sensing weights on every refresh.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingLayer {
    pub alpha: Vec<f64>,
}

impl ScalingLayer {
    fn apply_rows(&self, y: &DenseMatrix) -> DenseMatrix {
        let mut out = y.clone();
        for b in 0..out.rows() {
            for (v, a) in out.row_mut(b).iter_mut().zip(&self.alpha) {
                *v *= a;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    /// `fan_in x fan_out`.
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    /// Uniform weights in `+-1/sqrt(fan_in)`, zero bias.
    pub fn init(fan_in: usize, fan_out: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        Self {
            weights: DenseMatrix::from_fn(fan_in, fan_out, |_, _| rng.uniform_range(-bound, bound)),
            bias: vec![0.0; fan_out],
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.cols()
    }

    fn forward(&self, input: &DenseMatrix) -> Result<DenseMatrix> {
        let mut out = matmul(input, false, &self.weights, false)?;
        for b in 0..out.rows() {
            for (v, bias) in out.row_mut(b).iter_mut().zip(&self.bias) {
                *v += bias;
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormLayer {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    /// Fraction of the old running statistic kept at each update.
    pub momentum: f64,
    pub epsilon: f64,
}

impl BatchNormLayer {
    pub fn new(units: usize) -> Self {
        Self {
            gamma: vec![1.0; units],
            beta: vec![0.0; units],
            running_mean: vec![0.0; units],
            running_var: vec![1.0; units],
            momentum: BN_MOMENTUM,
            epsilon: BN_EPSILON,
        }
    }

    pub fn units(&self) -> usize {
        self.gamma.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub dense: DenseLayer,
    pub bn: BatchNormLayer,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionNet {
    pub scaling: ScalingLayer,
    pub hidden: Vec<HiddenLayer>,
    pub output: DenseLayer,
}

/// Per-hidden-layer intermediates kept for the backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Batch-normalized pre-affine values.
    pub normalized: DenseMatrix,
    pub batch_mean: Vec<f64>,
    /// Biased batch variance.
    pub batch_var: Vec<f64>,
    pub inv_std: Vec<f64>,
}

/// Everything a train-mode forward pass leaves behind for backpropagation.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub(crate) batch_tag: BatchTag,
    /// Raw measurements `B x m`, before scaling.
    pub measurements: DenseMatrix,
    /// `activations[0]` is the scaled measurement batch; `activations[l + 1]`
    /// is the ReLU output of hidden layer `l`.
    pub activations: Vec<DenseMatrix>,
    pub layers: Vec<LayerCache>,
    /// Reconstructions `B x n`.
    pub output: DenseMatrix,
}

/// Shape plus a hash of the bit patterns, used to tell whether a cache
/// came from the batch it is being paired with.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BatchTag {
    rows: usize,
    cols: usize,
    hash: u64,
}

impl BatchTag {
    pub(crate) fn of(batch: &DenseMatrix) -> Self {
        // FNV-1a over the raw bits
        let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
        for v in batch.as_slice() {
            hash ^= v.to_bits();
            hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
        }
        Self {
            rows: batch.rows(),
            cols: batch.cols(),
            hash,
        }
    }
}

impl ReconstructionNet {
    pub fn new(config: &NetworkConfig, rng: &mut SeededRng) -> Result<Self> {
        config.validate()?;
        let mut hidden = Vec::with_capacity(config.hidden_layers);
        let mut fan_in = config.m();
        for _ in 0..config.hidden_layers {
            hidden.push(HiddenLayer {
                dense: DenseLayer::init(fan_in, config.hidden_units, rng),
                bn: BatchNormLayer::new(config.hidden_units),
            });
            fan_in = config.hidden_units;
        }
        let output = DenseLayer::init(fan_in, config.n(), rng);
        Ok(Self {
            scaling: ScalingLayer {
                alpha: vec![1.0; config.m()],
            },
            hidden,
            output,
        })
    }

    pub fn measurement_dim(&self) -> usize {
        self.scaling.alpha.len()
    }

    pub fn output_dim(&self) -> usize {
        self.output.fan_out()
    }

    fn check_operator(&self, op: &impl SensingOperator, batch: &DenseMatrix) -> Result<()> {
        if op.output_dim() != self.measurement_dim() {
            return Err(dim_err(format!(
                "sensing operator yields {} measurements, network expects {}",
                op.output_dim(),
                self.measurement_dim()
            )));
        }
        if batch.cols() != op.input_dim() {
            return Err(dim_err(format!(
                "batch rows have {} entries, sensing operator expects {}",
                batch.cols(),
                op.input_dim()
            )));
        }
        Ok(())
    }

    /// Train-mode forward pass using batch statistics. Updates the running
    /// statistics of every batch-norm layer.
    pub fn forward_train(
        &mut self,
        op: &impl SensingOperator,
        batch: &DenseMatrix,
    ) -> Result<(DenseMatrix, ForwardCache)> {
        let rows = batch.rows();
        if rows < 2 {
            return Err(arg_err(format!(
                "train-mode forward needs at least 2 samples, got {rows}"
            )));
        }
        self.check_operator(op, batch)?;
        let measurements = op.sense_batch(batch)?;
        let mut current = self.scaling.apply_rows(&measurements);
        let mut activations = Vec::with_capacity(self.hidden.len() + 1);
        let mut layers = Vec::with_capacity(self.hidden.len());
        for layer in &mut self.hidden {
            let mut z = layer.dense.forward(&current)?;
            let units = z.cols();
            let inv_b = 1.0 / rows as f64;
            let mut mean = vec![0.0; units];
            for b in 0..rows {
                for (acc, v) in mean.iter_mut().zip(z.row(b)) {
                    *acc += v;
                }
            }
            mean.iter_mut().for_each(|v| *v *= inv_b);
            let mut var = vec![0.0; units];
            for b in 0..rows {
                for ((acc, v), mu) in var.iter_mut().zip(z.row(b)).zip(&mean) {
                    let d = v - mu;
                    *acc += d * d;
                }
            }
            var.iter_mut().for_each(|v| *v *= inv_b);
            let bn = &mut layer.bn;
            let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + bn.epsilon).sqrt()).collect();
            for b in 0..rows {
                for (u, v) in z.row_mut(b).iter_mut().enumerate() {
                    *v = (*v - mean[u]) * inv_std[u];
                }
            }
            let normalized = z;
            let mut out = normalized.clone();
            for b in 0..rows {
                for (u, v) in out.row_mut(b).iter_mut().enumerate() {
                    *v = (bn.gamma[u] * *v + bn.beta[u]).max(0.0);
                }
            }
            for u in 0..units {
                bn.running_mean[u] = bn.momentum * bn.running_mean[u] + (1.0 - bn.momentum) * mean[u];
                bn.running_var[u] = bn.momentum * bn.running_var[u] + (1.0 - bn.momentum) * var[u];
            }
            activations.push(current);
            layers.push(LayerCache {
                normalized,
                batch_mean: mean,
                batch_var: var,
                inv_std,
            });
            current = out;
        }
        let output = self.output.forward(&current)?;
        activations.push(current);
        let cache = ForwardCache {
            batch_tag: BatchTag::of(batch),
            measurements,
            activations,
            layers,
            output: output.clone(),
        };
        Ok((output, cache))
    }

    /// Inference on raw measurements: scaling, hidden layers with running
    /// statistics, output layer.
    pub fn decode_batch(&self, measurements: &DenseMatrix) -> Result<DenseMatrix> {
        if measurements.cols() != self.measurement_dim() {
            return Err(dim_err(format!(
                "measurement rows have {} entries, network expects {}",
                measurements.cols(),
                self.measurement_dim()
            )));
        }
        let mut current = self.scaling.apply_rows(measurements);
        for layer in &self.hidden {
            let mut z = layer.dense.forward(&current)?;
            let bn = &layer.bn;
            let inv_std: Vec<f64> = bn
                .running_var
                .iter()
                .map(|v| 1.0 / (v + bn.epsilon).sqrt())
                .collect();
            for b in 0..z.rows() {
                for (u, v) in z.row_mut(b).iter_mut().enumerate() {
                    let xhat = (*v - bn.running_mean[u]) * inv_std[u];
                    *v = (bn.gamma[u] * xhat + bn.beta[u]).max(0.0);
                }
            }
            current = z;
        }
        self.output.forward(&current)
    }

    /// Inference-mode pass over a `B x n` batch.
    pub fn infer_batch(&self, op: &impl SensingOperator, batch: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_operator(op, batch)?;
        self.decode_batch(&op.sense_batch(batch)?)
    }

    /// Inference-mode reconstruction of one patch.
    pub fn forward_infer(&self, theta_sb: &SparseTernaryMatrix, x: &[f64]) -> Result<Vec<f64>> {
        let batch = DenseMatrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.infer_batch(theta_sb, &batch)?.into_vec())
    }

    /// Every dense weight matrix, hidden layers first, output last.
    pub fn dense_layers(&self) -> impl Iterator<Item = &DenseLayer> {
        self.hidden
            .iter()
            .map(|h| &h.dense)
            .chain(std::iter::once(&self.output))
    }

    /// `sum ||W||^2` over all dense weight matrices (biases excluded).
    pub fn weight_norm_sq(&self) -> f64 {
        self.dense_layers().map(|l| l.weights.frobenius_sq()).sum()
    }
}

impl ForwardCache {
    pub(crate) fn check_batch(&self, batch: &DenseMatrix) -> Result<()> {
        if self.batch_tag != BatchTag::of(batch) {
            return Err(Error::StaleCache(
                "cache was produced from a different batch".into(),
            ));
        }
        Ok(())
    }
}
