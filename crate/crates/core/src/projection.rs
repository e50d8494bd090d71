//! Continuous sensing weights to sparse ternary projection plus per-column
//! scale factors: column-wise top-K selection, masking, sign binarization,
//! and the closed-form least-squares scale.

use crate::error::{arg_err, dim_err, Result};
use crate::numerics::{DenseMatrix, Sign, SparseTernaryMatrix};

/// Per-column row selections, each sorted ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    n: usize,
    columns: Vec<Vec<usize>>,
}

impl Mask {
    pub fn new(n: usize, columns: Vec<Vec<usize>>) -> Result<Self> {
        for (j, col) in columns.iter().enumerate() {
            if col.windows(2).any(|w| w[0] >= w[1]) || col.iter().any(|&i| i >= n) {
                return Err(arg_err(format!(
                    "mask column {j} must hold strictly increasing indices below {n}"
                )));
            }
        }
        Ok(Self { n, columns })
    }

    /// Mask selecting every entry of an `n x m` matrix.
    pub fn full(n: usize, m: usize) -> Self {
        Self {
            n,
            columns: vec![(0..n).collect(); m],
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.columns.len()
    }

    pub fn column(&self, j: usize) -> &[usize] {
        &self.columns[j]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.columns[j].binary_search(&i).is_ok()
    }
}

/// Keeps, per column, the `k` rows of largest magnitude. Ties go to the
/// lower row index.
pub fn top_k_select(theta: &DenseMatrix, k: usize) -> Result<Mask> {
    let (n, m) = theta.shape();
    if k == 0 || k > n {
        return Err(arg_err(format!("k = {k} outside [1, {n}]")));
    }
    let mut order: Vec<usize> = Vec::with_capacity(n);
    let columns = (0..m)
        .map(|j| {
            order.clear();
            order.extend(0..n);
            let key = |i: &usize| theta.get(*i, j).abs();
            // total order: larger magnitude first, then lower index
            let cmp = |a: &usize, b: &usize| key(b).total_cmp(&key(a)).then(a.cmp(b));
            if k < n {
                order.select_nth_unstable_by(k - 1, cmp);
            }
            let mut chosen = order[..k].to_vec();
            chosen.sort_unstable();
            chosen
        })
        .collect();
    Ok(Mask { n, columns })
}

/// Hadamard product with the mask: off-mask entries become exactly zero.
pub fn apply_mask(theta: &DenseMatrix, mask: &Mask) -> Result<DenseMatrix> {
    check_mask(theta, mask)?;
    let mut out = DenseMatrix::zeros(theta.rows(), theta.cols());
    for j in 0..mask.m() {
        for &i in mask.column(j) {
            out.set(i, j, theta.get(i, j));
        }
    }
    Ok(out)
}

/// Signs of the masked entries. A masked zero counts as `+1` so each column
/// keeps exactly as many nonzeros as its mask.
pub fn binarize(theta_s: &DenseMatrix, mask: &Mask) -> Result<SparseTernaryMatrix> {
    check_mask(theta_s, mask)?;
    let k = mask.columns.first().map_or(0, Vec::len);
    let columns = (0..mask.m())
        .map(|j| {
            mask.column(j)
                .iter()
                .map(|&i| (i, Sign::of(theta_s.get(i, j))))
                .collect()
        })
        .collect();
    SparseTernaryMatrix::new(theta_s.rows(), theta_s.cols(), k, columns)
}

/// `(1/k) * ||theta_s_col||_1`: the optimal scale once the signs are fixed.
pub fn compute_alpha(theta_s_col: &[f64], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(arg_err("k must be positive"));
    }
    let l1: f64 = theta_s_col.iter().map(|v| v.abs()).sum();
    Ok(l1 / k as f64)
}

/// `||theta - alpha * theta_sb||^2` for one column.
pub fn approximation_error(theta_col: &[f64], theta_sb_col: &[f64], alpha: f64) -> Result<f64> {
    if theta_col.len() != theta_sb_col.len() {
        return Err(dim_err(format!(
            "column lengths {} and {}",
            theta_col.len(),
            theta_sb_col.len()
        )));
    }
    Ok(theta_col
        .iter()
        .zip(theta_sb_col)
        .map(|(t, s)| {
            let r = t - alpha * s;
            r * r
        })
        .sum())
}

fn check_mask(theta: &DenseMatrix, mask: &Mask) -> Result<()> {
    if theta.rows() != mask.n() || theta.cols() != mask.m() {
        return Err(dim_err(format!(
            "mask is {}x{}, matrix is {}x{}",
            mask.n(),
            mask.m(),
            theta.rows(),
            theta.cols()
        )));
    }
    Ok(())
}

/// Continuous sensing weights together with their derived sparse ternary
/// projection and scale factors.
///
/// The caches are only valid right after [`refresh`](Self::refresh); any
/// change to `theta` has to be followed by a refresh before they are read
/// again.
#[derive(Debug, Clone)]
pub struct SensingWeights {
    theta: DenseMatrix,
    k: usize,
    mask: Mask,
    theta_sb: SparseTernaryMatrix,
    alpha: Vec<f64>,
}

impl SensingWeights {
    pub fn new(theta: DenseMatrix, k: usize) -> Result<Self> {
        if !theta.is_finite() {
            return Err(arg_err("sensing weights must be finite"));
        }
        let (mask, theta_sb, alpha) = derive(&theta, k)?;
        Ok(Self {
            theta,
            k,
            mask,
            theta_sb,
            alpha,
        })
    }

    /// Recomputes mask, ternary projection and scales from the current
    /// continuous weights.
    pub fn refresh(&mut self) -> Result<()> {
        if !self.theta.is_finite() {
            return Err(arg_err("sensing weights must be finite"));
        }
        let (mask, theta_sb, alpha) = derive(&self.theta, self.k)?;
        self.mask = mask;
        self.theta_sb = theta_sb;
        self.alpha = alpha;
        Ok(())
    }

    pub fn theta(&self) -> &DenseMatrix {
        &self.theta
    }

    /// Mutable continuous weights. Call [`refresh`](Self::refresh) before
    /// reading the derived caches again.
    pub fn theta_mut(&mut self) -> &mut DenseMatrix {
        &mut self.theta
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn n(&self) -> usize {
        self.theta.rows()
    }

    pub fn m(&self) -> usize {
        self.theta.cols()
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    pub fn theta_sb(&self) -> &SparseTernaryMatrix {
        &self.theta_sb
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }
}

fn derive(theta: &DenseMatrix, k: usize) -> Result<(Mask, SparseTernaryMatrix, Vec<f64>)> {
    let mask = top_k_select(theta, k)?;
    let theta_s = apply_mask(theta, &mask)?;
    let theta_sb = binarize(&theta_s, &mask)?;
    let alpha = (0..theta.cols())
        .map(|j| {
            let masked: Vec<f64> = mask.column(j).iter().map(|&i| theta_s.get(i, j)).collect();
            compute_alpha(&masked, k)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((mask, theta_sb, alpha))
}
