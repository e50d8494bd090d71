//! Conventional compressed-sensing baseline: dense random ternary
//! projections, an orthonormal 2D DCT sparsifying basis, and l1 recovery
//! through iterative soft thresholding on the Lagrangian relaxation
//! `0.5 ||A u - y||^2 + lambda ||u||_1`.
//!
//! Reports should label this arm "BP (ISTA relaxation)".

use std::f64::consts::PI;

use crate::error::{arg_err, dim_err, Result};
use crate::imaging::{extract_patches, GrayImage};
use crate::model::reassemble;
use crate::numerics::{dense_matvec, gemm, matmul, DenseMatrix, SeededRng};

pub const METHOD_LABEL: &str = "BP (ISTA relaxation)";

/// `m x n` matrix with i.i.d. entries drawn uniformly from {-1, 0, +1}.
pub fn random_ternary_projection(n: usize, m: usize, rng: &mut SeededRng) -> Result<DenseMatrix> {
    if m == 0 || m >= n {
        return Err(arg_err(format!("need 0 < m < n, got m = {m}, n = {n}")));
    }
    Ok(DenseMatrix::from_fn(m, n, |_, _| rng.below(3) as f64 - 1.0))
}

/// Orthonormal separable 2D DCT-II synthesis matrix for `side x side`
/// patches: `x = psi * u` with `x` in raster order and coefficient
/// `u[k1 * side + k2]` for vertical frequency `k1`, horizontal `k2`.
#[derive(Debug, Clone, PartialEq)]
pub struct DctBasis {
    side: usize,
    psi: DenseMatrix,
}

impl DctBasis {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn matrix(&self) -> &DenseMatrix {
        &self.psi
    }

    /// `u = psi^T x`.
    pub fn analyze(&self, x: &[f64]) -> Result<Vec<f64>> {
        dense_matvec(&self.psi.transpose(), x)
    }

    /// `x = psi u`.
    pub fn synthesize(&self, u: &[f64]) -> Result<Vec<f64>> {
        dense_matvec(&self.psi, u)
    }
}

/// 1D orthonormal DCT-II analysis matrix, `c[k][i]`.
fn dct_1d(side: usize) -> Vec<Vec<f64>> {
    let s = side as f64;
    (0..side)
        .map(|k| {
            let norm = if k == 0 { (1.0 / s).sqrt() } else { (2.0 / s).sqrt() };
            (0..side)
                .map(|i| norm * (PI * (2 * i + 1) as f64 * k as f64 / (2.0 * s)).cos())
                .collect()
        })
        .collect()
}

pub fn dct_basis(side: usize) -> Result<DctBasis> {
    if side == 0 {
        return Err(arg_err("patch side must be positive"));
    }
    let c = dct_1d(side);
    let n = side * side;
    let psi = DenseMatrix::from_fn(n, n, |p, q| {
        let (r, col) = (p / side, p % side);
        let (k1, k2) = (q / side, q % side);
        c[k1][r] * c[k2][col]
    });
    Ok(DctBasis { side, psi })
}

/// How the l1 weight is chosen for each instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Lambda {
    Fixed(f64),
    /// `factor * ||A^T y||_inf`.
    Relative(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BpConfig {
    pub lambda: Lambda,
    pub max_iters: usize,
    /// Stop once the relative objective change drops below this.
    pub tol: f64,
}

impl Default for BpConfig {
    fn default() -> Self {
        Self {
            lambda: Lambda::Relative(0.01),
            max_iters: 1000,
            tol: 1e-6,
        }
    }
}

impl BpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(arg_err("max_iters must be at least 1"));
        }
        if self.tol.is_nan() || self.tol <= 0.0 {
            return Err(arg_err("tol must be positive"));
        }
        match self.lambda {
            Lambda::Fixed(v) | Lambda::Relative(v) if v > 0.0 && v.is_finite() => Ok(()),
            _ => Err(arg_err("lambda must be positive")),
        }
    }

    fn lambda_for(&self, aty_inf: f64) -> f64 {
        match self.lambda {
            Lambda::Fixed(v) => v,
            Lambda::Relative(f) => f * aty_inf,
        }
    }
}

pub fn soft_threshold(v: f64, t: f64) -> f64 {
    if v > t {
        v - t
    } else if v < -t {
        v + t
    } else {
        0.0
    }
}

/// Largest eigenvalue of `A^T A` by power iteration, i.e. `||A||_2^2`.
pub fn spectral_norm_sq(a: &DenseMatrix) -> f64 {
    let n = a.cols();
    if n == 0 || a.rows() == 0 {
        return 0.0;
    }
    let at = a.transpose();
    // deterministic, non-degenerate start
    let mut v: Vec<f64> = (0..n).map(|i| 1.0 + (i as f64 * 0.618_033_988_75).fract()).collect();
    let mut estimate = 0.0;
    for _ in 0..500 {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return 0.0;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        let av = dense_matvec(a, &v).expect("shape");
        let w = dense_matvec(&at, &av).expect("shape");
        let next: f64 = w.iter().zip(&v).map(|(a, b)| a * b).sum();
        v = w;
        if (next - estimate).abs() <= 1e-13 * next {
            estimate = next;
            break;
        }
        estimate = next;
    }
    estimate
}

#[derive(Debug, Clone, PartialEq)]
pub struct IstaResult {
    pub u: Vec<f64>,
    pub lambda: f64,
    pub iterations: usize,
    /// Objective before the first iteration and after each one.
    pub objective: Vec<f64>,
}

pub fn objective(a: &DenseMatrix, y: &[f64], u: &[f64], lambda: f64) -> Result<f64> {
    let au = dense_matvec(a, u)?;
    let fit: f64 = au.iter().zip(y).map(|(p, q)| (p - q) * (p - q)).sum();
    let l1: f64 = u.iter().map(|v| v.abs()).sum();
    Ok(0.5 * fit + lambda * l1)
}

/// Iterative soft thresholding from `u = 0` with step `1 / ||A||_2^2`.
pub fn ista_solve(a: &DenseMatrix, y: &[f64], cfg: &BpConfig) -> Result<IstaResult> {
    cfg.validate()?;
    if y.len() != a.rows() {
        return Err(dim_err(format!(
            "{} measurements for a {}-row matrix",
            y.len(),
            a.rows()
        )));
    }
    let lipschitz = spectral_norm_sq(a);
    if lipschitz == 0.0 {
        return Err(arg_err("measurement matrix is zero"));
    }
    let step = 1.0 / lipschitz;
    let at = a.transpose();
    let aty = dense_matvec(&at, y)?;
    let lambda = cfg.lambda_for(aty.iter().fold(0.0, |m, v| v.abs().max(m)));
    let thresh = step * lambda;

    let mut u = vec![0.0; a.cols()];
    let mut obj = objective(a, y, &u, lambda)?;
    let mut history = vec![obj];
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        let residual: Vec<f64> = dense_matvec(a, &u)?.iter().zip(y).map(|(p, q)| p - q).collect();
        let grad = dense_matvec(&at, &residual)?;
        for (ui, gi) in u.iter_mut().zip(&grad) {
            *ui = soft_threshold(*ui - step * gi, thresh);
        }
        iterations += 1;
        let next = objective(a, y, &u, lambda)?;
        history.push(next);
        let change = (obj - next).abs() / obj.abs().max(f64::MIN_POSITIVE);
        obj = next;
        if change < cfg.tol {
            break;
        }
    }
    Ok(IstaResult {
        u,
        lambda,
        iterations,
        objective: history,
    })
}

/// Column-parallel ISTA for many measurement vectors sharing one matrix.
/// Every column follows exactly the iteration of [`ista_solve`] and is
/// frozen once it meets the tolerance. `ys` holds one measurement vector per
/// row; the result holds one coefficient vector per row.
pub fn ista_solve_batch(a: &DenseMatrix, ys: &DenseMatrix, cfg: &BpConfig) -> Result<DenseMatrix> {
    cfg.validate()?;
    if ys.cols() != a.rows() {
        return Err(dim_err(format!(
            "measurement rows have {} entries, matrix has {} rows",
            ys.cols(),
            a.rows()
        )));
    }
    let lipschitz = spectral_norm_sq(a);
    if lipschitz == 0.0 {
        return Err(arg_err("measurement matrix is zero"));
    }
    let step = 1.0 / lipschitz;
    let count = ys.rows();
    let n = a.cols();
    let aty = matmul(ys, false, a, false)?;
    let lambdas: Vec<f64> = (0..count)
        .map(|p| cfg.lambda_for(aty.row(p).iter().fold(0.0, |m, v| v.abs().max(m))))
        .collect();
    let mut u = DenseMatrix::zeros(count, n);
    let mut objs: Vec<f64> = (0..count)
        .map(|p| 0.5 * ys.row(p).iter().map(|v| v * v).sum::<f64>())
        .collect();
    let mut active: Vec<bool> = vec![true; count];
    // residual A u - y, kept current for the objective and the next gradient
    let mut residual = DenseMatrix::zeros(count, a.rows());
    for p in 0..count {
        for (r, y) in residual.row_mut(p).iter_mut().zip(ys.row(p)) {
            *r = -y;
        }
    }
    let mut grad = DenseMatrix::zeros(count, n);
    for _ in 0..cfg.max_iters {
        if !active.iter().any(|&b| b) {
            break;
        }
        gemm(&residual, false, a, false, 0.0, &mut grad)?;
        for p in 0..count {
            if !active[p] {
                continue;
            }
            let t = step * lambdas[p];
            for (ui, gi) in u.row_mut(p).iter_mut().zip(grad.row(p)) {
                *ui = soft_threshold(*ui - step * gi, t);
            }
        }
        gemm(&u, false, a, true, 0.0, &mut residual)?;
        for p in 0..count {
            for (r, y) in residual.row_mut(p).iter_mut().zip(ys.row(p)) {
                *r -= y;
            }
            if !active[p] {
                continue;
            }
            let fit: f64 = residual.row(p).iter().map(|r| r * r).sum();
            let next = 0.5 * fit + lambdas[p] * u.row(p).iter().map(|v| v.abs()).sum::<f64>();
            let change = (objs[p] - next).abs() / objs[p].abs().max(f64::MIN_POSITIVE);
            objs[p] = next;
            if change < cfg.tol {
                active[p] = false;
            }
        }
    }
    Ok(u)
}

/// Recovers one patch: `A = phi psi`, ISTA on `A`, then `x = psi u`.
pub fn bp_reconstruct(phi: &DenseMatrix, basis: &DctBasis, y: &[f64], cfg: &BpConfig) -> Result<Vec<f64>> {
    if phi.cols() != basis.psi.rows() {
        return Err(dim_err(format!(
            "projection has {} columns, basis has dimension {}",
            phi.cols(),
            basis.psi.rows()
        )));
    }
    let a = matmul(phi, false, basis.matrix(), false)?;
    let res = ista_solve(&a, y, cfg)?;
    basis.synthesize(&res.u)
}

/// Senses every window of `img` with `phi` (on raw pixels), recovers each
/// patch with ISTA under the DCT basis, and overlap-averages.
pub fn bp_reconstruct_image(
    phi: &DenseMatrix,
    basis: &DctBasis,
    img: &GrayImage,
    stride: usize,
    cfg: &BpConfig,
) -> Result<GrayImage> {
    let side = basis.side();
    if phi.cols() != side * side {
        return Err(dim_err("projection width does not match the basis"));
    }
    let patches = extract_patches(img, side, stride)?;
    let ys = matmul(&patches.vectors, false, phi, true)?;
    let a = matmul(phi, false, basis.matrix(), false)?;
    let coeffs = ista_solve_batch(&a, &ys, cfg)?;
    let recon = matmul(&coeffs, false, basis.matrix(), true)?;
    reassemble(recon, side, stride, img.width(), img.height())
}
