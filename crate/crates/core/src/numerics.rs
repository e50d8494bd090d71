//! Dense and sparse-ternary linear algebra plus the seeded generator used
//! everywhere randomness is needed.
//!
//! All sums run over ascending indices so that the dense and ternary paths
//! agree bit for bit.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{dim_err, Error, Result};

/// Row-major matrix of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(size: usize) -> Self {
        let mut out = Self::zeros(size, size);
        for i in 0..size {
            out.values[i * size + i] = 1.0;
        }
        out
    }

    /// Builds a matrix from row-major values, rejecting wrong lengths and
    /// non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(dim_err(format!(
                "{} values for a {rows}x{cols} matrix",
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                values.push(f(r, c));
            }
        }
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.values[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.values[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    /// Copies the listed rows, in order, into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let mut values = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        Self {
            rows: indices.len(),
            cols: self.cols,
            values,
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// `y = A x`, summing each row in ascending column order.
pub fn dense_matvec(a: &DenseMatrix, x: &[f64]) -> Result<Vec<f64>> {
    if x.len() != a.cols {
        return Err(dim_err(format!(
            "matrix has {} columns, vector has {} entries",
            a.cols,
            x.len()
        )));
    }
    Ok((0..a.rows)
        .map(|r| {
            let mut acc = 0.0;
            for (aij, xj) in a.row(r).iter().zip(x) {
                acc += aij * xj;
            }
            acc
        })
        .collect())
}

/// `C = op(A) op(B) + beta C` where `op` optionally transposes.
///
/// Backed by `matrixmultiply`, whose per-element reduction order depends only
/// on the shapes, so repeated calls are bit-reproducible.
pub fn gemm(
    a: &DenseMatrix,
    trans_a: bool,
    b: &DenseMatrix,
    trans_b: bool,
    beta: f64,
    c: &mut DenseMatrix,
) -> Result<()> {
    let (m, k) = if trans_a { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (kb, n) = if trans_b { (b.cols, b.rows) } else { (b.rows, b.cols) };
    if k != kb || c.rows != m || c.cols != n {
        return Err(dim_err(format!(
            "gemm: op(A) is {m}x{k}, op(B) is {kb}x{n}, C is {}x{}",
            c.rows, c.cols
        )));
    }
    if m == 0 || n == 0 {
        return Ok(());
    }
    if k == 0 {
        for v in &mut c.values {
            *v *= beta;
        }
        return Ok(());
    }
    let (rsa, csa) = if trans_a {
        (1, a.cols as isize)
    } else {
        (a.cols as isize, 1)
    };
    let (rsb, csb) = if trans_b {
        (1, b.cols as isize)
    } else {
        (b.cols as isize, 1)
    };
    // SAFETY: the shapes and strides above describe exactly the owned
    // buffers of `a`, `b` and `c`, and `c` does not alias either input.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.values.as_ptr(),
            rsa,
            csa,
            b.values.as_ptr(),
            rsb,
            csb,
            beta,
            c.values.as_mut_ptr(),
            c.cols as isize,
            1,
        );
    }
    Ok(())
}

/// `op(A) op(B)` into a fresh matrix.
pub fn matmul(a: &DenseMatrix, trans_a: bool, b: &DenseMatrix, trans_b: bool) -> Result<DenseMatrix> {
    let m = if trans_a { a.cols } else { a.rows };
    let n = if trans_b { b.rows } else { b.cols };
    let mut c = DenseMatrix::zeros(m, n);
    gemm(a, trans_a, b, trans_b, 0.0, &mut c)?;
    Ok(c)
}

/// Sign of a ternary nonzero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Sign {
    Minus,
    Plus,
}

impl Sign {
    pub fn of(v: f64) -> Self {
        if v < 0.0 {
            Sign::Minus
        } else {
            Sign::Plus
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Minus => -1.0,
            Sign::Plus => 1.0,
        }
    }
}

/// An `n x m` matrix over {-1, 0, +1} with exactly `k` nonzeros per column,
/// stored as per-column lists of `(row, sign)` with strictly increasing rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SparseTernaryMatrix {
    n: usize,
    m: usize,
    k: usize,
    rows: Vec<u32>,
    signs: Vec<Sign>,
}

impl SparseTernaryMatrix {
    pub fn new(n: usize, m: usize, k: usize, columns: Vec<Vec<(usize, Sign)>>) -> Result<Self> {
        if k > n {
            return Err(Error::CorruptMatrix(format!("k = {k} exceeds n = {n}")));
        }
        if n > u32::MAX as usize {
            return Err(Error::CorruptMatrix(format!("n = {n} exceeds 32-bit indexing")));
        }
        if columns.len() != m {
            return Err(Error::CorruptMatrix(format!(
                "expected {m} columns, got {}",
                columns.len()
            )));
        }
        let mut rows = Vec::with_capacity(m * k);
        let mut signs = Vec::with_capacity(m * k);
        for (j, col) in columns.into_iter().enumerate() {
            if col.len() != k {
                return Err(Error::CorruptMatrix(format!(
                    "column {j} has {} entries, expected {k}",
                    col.len()
                )));
            }
            let mut prev: Option<usize> = None;
            for (i, s) in col {
                if i >= n {
                    return Err(Error::CorruptMatrix(format!(
                        "column {j}: row index {i} out of range for n = {n}"
                    )));
                }
                if let Some(p) = prev {
                    if i <= p {
                        return Err(Error::CorruptMatrix(format!(
                            "column {j}: row indices not strictly increasing ({p} then {i})"
                        )));
                    }
                }
                prev = Some(i);
                rows.push(i as u32);
                signs.push(s);
            }
        }
        Ok(Self { n, m, k, rows, signs })
    }

    /// Inverse of [`densify`]: reads an `n x m` dense matrix whose entries are
    /// all in {-1, 0, +1} and whose columns share one nonzero count.
    pub fn from_dense(d: &DenseMatrix) -> Result<Self> {
        let (n, m) = d.shape();
        let mut columns = Vec::with_capacity(m);
        for j in 0..m {
            let mut col = Vec::new();
            for i in 0..n {
                let v = d.get(i, j);
                if v == 1.0 {
                    col.push((i, Sign::Plus));
                } else if v == -1.0 {
                    col.push((i, Sign::Minus));
                } else if v != 0.0 {
                    return Err(Error::CorruptMatrix(format!(
                        "entry ({i}, {j}) = {v} is not ternary"
                    )));
                }
            }
            columns.push(col);
        }
        let k = columns.first().map_or(0, Vec::len);
        Self::new(n, m, k, columns)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn m(&self) -> usize {
        self.m
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, Sign)> + '_ {
        let span = j * self.k..(j + 1) * self.k;
        self.rows[span.clone()]
            .iter()
            .zip(&self.signs[span])
            .map(|(&i, &s)| (i as usize, s))
    }

    pub fn columns(&self) -> impl Iterator<Item = Vec<(usize, Sign)>> + '_ {
        (0..self.m).map(move |j| self.column(j).collect())
    }

    /// Total number of nonzeros, `m * k`.
    pub fn nnz(&self) -> usize {
        self.m * self.k
    }

    /// Measurements `T^T x`, one per column, using only additions and
    /// subtractions in ascending row order.
    pub fn ternary_matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.n {
            return Err(dim_err(format!(
                "ternary matrix has {} rows, vector has {} entries",
                self.n,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.m];
        self.matvec_into(x, &mut y);
        Ok(y)
    }

    fn matvec_into(&self, x: &[f64], y: &mut [f64]) {
        for (j, yj) in y.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (i, s) in self.column(j) {
                match s {
                    Sign::Plus => acc += x[i],
                    Sign::Minus => acc -= x[i],
                }
            }
            *yj = acc;
        }
    }

    /// Row-wise [`ternary_matvec`](Self::ternary_matvec) over a `B x n` batch,
    /// giving `B x m`.
    pub fn sense_batch(&self, batch: &DenseMatrix) -> Result<DenseMatrix> {
        if batch.cols() != self.n {
            return Err(dim_err(format!(
                "batch has {} columns, ternary matrix has {} rows",
                batch.cols(),
                self.n
            )));
        }
        let mut out = DenseMatrix::zeros(batch.rows(), self.m);
        for b in 0..batch.rows() {
            self.matvec_into(batch.row(b), out.row_mut(b));
        }
        Ok(out)
    }
}

/// Expands a ternary matrix into its dense `n x m` form.
pub fn densify(t: &SparseTernaryMatrix) -> DenseMatrix {
    let mut d = DenseMatrix::zeros(t.n, t.m);
    for j in 0..t.m {
        for (i, s) in t.column(j) {
            d.set(i, j, s.value());
        }
    }
    d
}

/// Seeded ChaCha8 stream. Equal seeds give equal streams on every platform.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub const ALGORITHM: &'static str = "ChaCha8";

    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform in `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform in `[lo, hi)`.
    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `[0, n)`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    /// Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

impl RngCore for SeededRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}
