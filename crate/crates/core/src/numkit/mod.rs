//! Dense linear algebra used by the quantizer.
//!
//! Everything here works in `f64` and is deliberately small: products,
//! Cholesky factorization, triangular solves and SPD inversion. Operations
//! are pure and deterministic (fixed summation order), so identical inputs
//! produce bit-identical outputs on one platform.

mod io;

pub use io::{read_matrix, read_matrix_file, write_matrix, write_matrix_file, Dtype, MAGIC};

use std::fmt;
use std::ops::Index;

use crate::error::{Error, Result};

/// Symmetry tolerance accepted by [`cholesky`], relative to the largest entry.
pub const SYMMETRY_TOL: f64 = 1e-9;

/// Dense row-major real matrix. All entries are finite.
#[derive(Clone, PartialEq)]
pub struct RealMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl RealMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Input(format!(
                "non-finite entry at ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Result<Self> {
        let n = diag.len();
        let mut data = vec![0.0; n * n];
        for (i, &d) in diag.iter().enumerate() {
            data[i * n + i] = d;
        }
        Self::new(n, n, data)
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != n_cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} entries, expected {n_cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(n_rows, n_cols, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::new(rows, cols, data)
    }

    /// Crate-internal constructor for values already known to be finite.
    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        self.data.chunks(self.cols.max(1)).take(self.rows)
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn transpose(&self) -> RealMatrix {
        let mut data = Vec::with_capacity(self.data.len());
        for j in 0..self.cols {
            for i in 0..self.rows {
                data.push(self.get(i, j));
            }
        }
        Self::from_vec_unchecked(self.cols, self.rows, data)
    }

    pub fn scaled(&self, factor: f64) -> Result<RealMatrix> {
        Self::new(self.rows, self.cols, self.data.iter().map(|v| v * factor).collect())
    }

    pub fn add(&self, other: &RealMatrix) -> Result<RealMatrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &RealMatrix) -> Result<RealMatrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &RealMatrix, f: impl Fn(f64, f64) -> f64) -> Result<RealMatrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "{:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Self::new(self.rows, self.cols, data)
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Columns reordered so that output column `k` is input column `order[k]`.
    pub fn select_columns(&self, order: &[usize]) -> RealMatrix {
        let mut data = Vec::with_capacity(self.rows * order.len());
        for i in 0..self.rows {
            let row = self.row(i);
            data.extend(order.iter().map(|&j| row[j]));
        }
        Self::from_vec_unchecked(self.rows, order.len(), data)
    }

    /// Rows reordered so that output row `k` is input row `order[k]`.
    pub fn select_rows(&self, order: &[usize]) -> RealMatrix {
        let mut data = Vec::with_capacity(order.len() * self.cols);
        for &i in order {
            data.extend_from_slice(self.row(i));
        }
        Self::from_vec_unchecked(order.len(), self.cols, data)
    }
}

impl Index<(usize, usize)> for RealMatrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl fmt::Debug for RealMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "RealMatrix {}x{} [", self.rows, self.cols)?;
        for r in self.row_iter() {
            writeln!(f, "  {r:?}")?;
        }
        write!(f, "]")
    }
}

/// Matrix product `a · b`.
pub fn matmul(a: &RealMatrix, b: &RealMatrix) -> Result<RealMatrix> {
    if a.cols != b.rows {
        return Err(Error::Shape(format!(
            "cannot multiply {}x{} by {}x{}",
            a.rows, a.cols, b.rows, b.cols
        )));
    }
    let (n, m) = (a.rows, b.cols);
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let out_row = &mut out[i * m..(i + 1) * m];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (o, &bkj) in out_row.iter_mut().zip(b.row(k)) {
                *o += aik * bkj;
            }
        }
    }
    RealMatrix::new(n, m, out)
}

/// Lower-triangular Cholesky factor `L` with `L·Lᵀ = H`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowerTriangular(RealMatrix);

impl LowerTriangular {
    pub fn matrix(&self) -> &RealMatrix {
        &self.0
    }

    pub fn into_matrix(self) -> RealMatrix {
        self.0
    }

    pub fn dim(&self) -> usize {
        self.0.rows
    }

    /// `L · Lᵀ`.
    pub fn reconstruct(&self) -> RealMatrix {
        // Lower is finite and conformable with its own transpose.
        matmul(&self.0, &self.0.transpose()).expect("square factor")
    }

    /// Solves `L · y = b` by forward substitution.
    pub fn solve_lower(&self, b: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = &self.0;
        let mut y = vec![0.0; n];
        for i in 0..n {
            let mut acc = b[i];
            for (k, yk) in y.iter().enumerate().take(i) {
                acc -= l.get(i, k) * yk;
            }
            y[i] = acc / l.get(i, i);
        }
        y
    }

    /// Solves `Lᵀ · x = y` by back substitution.
    pub fn solve_upper_transposed(&self, y: &[f64]) -> Vec<f64> {
        let n = self.dim();
        let l = &self.0;
        let mut x = vec![0.0; n];
        for i in (0..n).rev() {
            let mut acc = y[i];
            for (k, xk) in x.iter().enumerate().skip(i + 1) {
                acc -= l.get(k, i) * xk;
            }
            x[i] = acc / l.get(i, i);
        }
        x
    }

    /// Solves `L · Lᵀ · x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        self.solve_upper_transposed(&self.solve_lower(b))
    }

    /// `L⁻¹`, also lower-triangular.
    pub fn inverse_factor(&self) -> RealMatrix {
        let n = self.dim();
        let l = &self.0;
        let mut inv = RealMatrix::zeros(n, n);
        for j in 0..n {
            inv.set(j, j, 1.0 / l.get(j, j));
            for i in j + 1..n {
                let mut acc = 0.0;
                for k in j..i {
                    acc -= l.get(i, k) * inv.get(k, j);
                }
                inv.set(i, j, acc / l.get(i, i));
            }
        }
        inv
    }
}

fn check_symmetric(h: &RealMatrix) -> Result<()> {
    if !h.is_square() {
        return Err(Error::Shape(format!(
            "expected a square matrix, got {}x{}",
            h.rows, h.cols
        )));
    }
    let tol = SYMMETRY_TOL * h.max_abs().max(1.0);
    for i in 0..h.rows {
        for j in 0..i {
            if (h.get(i, j) - h.get(j, i)).abs() > tol {
                return Err(Error::Domain(format!(
                    "matrix is not symmetric at ({i}, {j})"
                )));
            }
        }
    }
    Ok(())
}

/// Cholesky factorization of a symmetric positive definite matrix.
///
/// Only the lower triangle of `h` is read once symmetry has been checked. A
/// non-positive pivot is reported with its index so callers can add damping
/// and retry.
pub fn cholesky(h: &RealMatrix) -> Result<LowerTriangular> {
    check_symmetric(h)?;
    let n = h.rows;
    let mut l = RealMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = h.get(j, j);
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::NotPositiveDefinite { pivot: j, value: d });
        }
        let djj = d.sqrt();
        l.set(j, j, djj);
        for i in j + 1..n {
            let mut acc = h.get(i, j);
            for k in 0..j {
                acc -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, acc / djj);
        }
    }
    Ok(LowerTriangular(l))
}

/// Inverse of a symmetric positive definite matrix via its Cholesky factor.
/// The result is exactly symmetric.
pub fn spd_inverse(h: &RealMatrix) -> Result<RealMatrix> {
    let l = cholesky(h)?;
    Ok(inverse_from_factor(&l))
}

/// `(L·Lᵀ)⁻¹ = L⁻ᵀ·L⁻¹` computed from an existing factor.
pub fn inverse_from_factor(l: &LowerTriangular) -> RealMatrix {
    let n = l.dim();
    let linv = l.inverse_factor();
    let mut out = RealMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut acc = 0.0;
            for k in i..n {
                acc += linv.get(k, i) * linv.get(k, j);
            }
            out.set(i, j, acc);
            out.set(j, i, acc);
        }
    }
    out
}
