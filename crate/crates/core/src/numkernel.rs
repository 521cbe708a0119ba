//! Dense numeric primitives for the layerwise solvers.
//!
//! All solver state is `f64`. [`SymMatrix`] holds Gram matrices `X·Xᵀ` built
//! one column at a time; [`CholeskyFactor`] and [`SymMatrix::inverse`] give the
//! inverse-Hessian access the OBS updates need.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default dampening: fraction of the mean diagonal added to every diagonal entry.
pub const DEFAULT_DAMP_FRACTION: f64 = 0.01;

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                actual: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(Error::DimensionMismatch {
                    expected: cols,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
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

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }
}

/// Symmetric `dim × dim` matrix, stored full and row-major.
///
/// Both triangles are written on every update so `get(i, j) == get(j, i)`
/// holds bit-for-bit.
#[derive(Debug, Clone, PartialEq)]
pub struct SymMatrix {
    dim: usize,
    data: Vec<f64>,
}

impl SymMatrix {
    pub fn zeros(dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; dim * dim],
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self::from_diagonal(&vec![1.0; dim])
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * m.dim + i] = d;
        }
        m
    }

    /// Builds from explicit rows; rejects asymmetric or non-finite input.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.len();
        let mut data = Vec::with_capacity(dim * dim);
        for r in rows {
            if r.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(dim, data)
    }

    pub fn from_vec(dim: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != dim * dim {
            return Err(Error::DimensionMismatch {
                expected: dim * dim,
                actual: data.len(),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("symmetric matrix"));
        }
        for i in 0..dim {
            for j in 0..i {
                if data[i * dim + j] != data[j * dim + i] {
                    return Err(Error::invalid(format!(
                        "matrix not symmetric at ({i}, {j})"
                    )));
                }
            }
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.dim + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn diagonal(&self) -> Vec<f64> {
        (0..self.dim).map(|i| self.get(i, i)).collect()
    }

    /// `self += column · columnᵀ`.
    pub fn accumulate_gram(&mut self, column: &[f64]) -> Result<()> {
        if column.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: column.len(),
            });
        }
        if column.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("gram column"));
        }
        let n = self.dim;
        for i in 0..n {
            let ci = column[i];
            if ci == 0.0 {
                continue;
            }
            for j in 0..=i {
                let v = ci * column[j];
                self.data[i * n + j] += v;
                if i != j {
                    self.data[j * n + i] += v;
                }
            }
        }
        Ok(())
    }

    /// Elementwise `self += other`.
    pub fn add_assign(&mut self, other: &SymMatrix) -> Result<()> {
        if other.dim != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                actual: other.dim,
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// Adds `fraction × mean(diag)` to every diagonal entry (`fraction × 1`
    /// when the mean diagonal is zero).
    pub fn dampen(&mut self, fraction: f64) -> Result<()> {
        if !fraction.is_finite() {
            return Err(Error::NonFinite("dampening fraction"));
        }
        if fraction < 0.0 {
            return Err(Error::invalid(format!(
                "dampening fraction must be >= 0, got {fraction}"
            )));
        }
        if fraction == 0.0 || self.dim == 0 {
            return Ok(());
        }
        let mean = self.diagonal().iter().sum::<f64>() / self.dim as f64;
        let add = if mean == 0.0 {
            fraction
        } else {
            fraction * mean
        };
        for i in 0..self.dim {
            self.data[i * self.dim + i] += add;
        }
        Ok(())
    }

    pub fn dampened(&self, fraction: f64) -> Result<SymMatrix> {
        let mut m = self.clone();
        m.dampen(fraction)?;
        Ok(m)
    }

    pub fn cholesky(&self) -> Result<CholeskyFactor> {
        CholeskyFactor::new(self)
    }

    /// Inverse through the Cholesky factor: `(L·Lᵀ)⁻¹ = L⁻ᵀ·L⁻¹`.
    pub fn inverse(&self) -> Result<SymMatrix> {
        Ok(self.cholesky()?.inverse())
    }

    /// `vᵀ·M·v`.
    pub fn quad_form(&self, v: &[f64]) -> f64 {
        debug_assert_eq!(v.len(), self.dim);
        let mut total = 0.0;
        for i in 0..self.dim {
            if v[i] == 0.0 {
                continue;
            }
            let row = self.row(i);
            let dot: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            total += v[i] * dot;
        }
        total
    }

    /// Principal submatrix on `idx` (in the given order).
    pub fn submatrix(&self, idx: &[usize]) -> SymMatrix {
        let k = idx.len();
        let mut data = Vec::with_capacity(k * k);
        for &i in idx {
            for &j in idx {
                data.push(self.get(i, j));
            }
        }
        SymMatrix { dim: k, data }
    }
}

/// Lower-triangular `L` with `L·Lᵀ = M` and a strictly positive diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct CholeskyFactor {
    dim: usize,
    lower: Vec<f64>,
}

impl CholeskyFactor {
    pub fn new(m: &SymMatrix) -> Result<Self> {
        let n = m.dim;
        let mut l = vec![0.0; n * n];
        for j in 0..n {
            let mut d = m.get(j, j);
            for k in 0..j {
                d -= l[j * n + k] * l[j * n + k];
            }
            if d.is_nan() || d <= 0.0 || d.is_infinite() {
                return Err(Error::NotPositiveDefinite { index: j });
            }
            let djj = d.sqrt();
            l[j * n + j] = djj;
            for i in j + 1..n {
                let mut s = m.get(i, j);
                for k in 0..j {
                    s -= l[i * n + k] * l[j * n + k];
                }
                l[i * n + j] = s / djj;
            }
        }
        Ok(Self { dim: n, lower: l })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.lower[i * self.dim + j]
    }

    /// `L·Lᵀ`.
    pub fn reconstruct(&self) -> SymMatrix {
        let n = self.dim;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in 0..=j {
                    s += self.get(i, k) * self.get(j, k);
                }
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        SymMatrix { dim: n, data }
    }

    /// Solves `L·Lᵀ·x = b`.
    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim;
        if b.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                actual: b.len(),
            });
        }
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.get(i, k) * y[k];
            }
            y[i] = s / self.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.get(k, i) * y[k];
            }
            y[i] = s / self.get(i, i);
        }
        Ok(y)
    }

    /// Inverse of the factored matrix, symmetric by construction.
    pub fn inverse(&self) -> SymMatrix {
        let n = self.dim;
        // X = L⁻¹, lower triangular.
        let mut x = vec![0.0; n * n];
        for col in 0..n {
            x[col * n + col] = 1.0 / self.get(col, col);
            for i in col + 1..n {
                let mut s = 0.0;
                for k in col..i {
                    s -= self.get(i, k) * x[k * n + col];
                }
                x[i * n + col] = s / self.get(i, i);
            }
        }
        // M⁻¹ = Xᵀ·X.
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let mut s = 0.0;
                for k in i..n {
                    s += x[k * n + i] * x[k * n + j];
                }
                data[i * n + j] = s;
                data[j * n + i] = s;
            }
        }
        SymMatrix { dim: n, data }
    }
}
