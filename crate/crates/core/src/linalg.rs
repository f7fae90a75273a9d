//! Dense linear algebra substrate.
//!
//! Every covariance, cross-covariance and operator surrogate in the crate is a
//! [`DenseMatrix`]: a row-major block of `f64`. Decompositions are delegated to
//! `faer` (SVD) and `nalgebra` (LU, QR, symmetric eigenproblems); this module owns the conventions layered on top (descending
//! singular values, the deterministic sign rule, regularized inverses).

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod perturbation;

/// Default floor added to covariance matrices before inversion.
pub const DEFAULT_COV_EPS: f64 = 1e-8;

pub type DenseVector = Vec<f64>;

#[derive(Debug, Error)]
pub enum LinalgError {
    #[error("shape mismatch in {op}: {left:?} vs {right:?}")]
    ShapeMismatch {
        op: &'static str,
        left: (usize, usize),
        right: (usize, usize),
    },
    #[error("data length {len} does not match {rows}x{cols}")]
    BadLength { rows: usize, cols: usize, len: usize },
    #[error("non-finite entry at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("svd did not converge")]
    SvdNoConvergence,
    #[error("symmetric eigendecomposition did not converge within {iterations} iterations")]
    EigNoConvergence { iterations: usize },
    #[error("rank {d} exceeds min dimension {max}")]
    RankTooLarge { d: usize, max: usize },
    #[error("columns are not orthonormal: max |BᵀB - I| = {deviation:.3e}")]
    NotOrthonormal { deviation: f64 },
    #[error("matrix is not symmetric: max |M - Mᵀ| = {deviation:.3e}")]
    NotSymmetric { deviation: f64 },
    #[error("matrix is not positive semidefinite after regularization: eigenvalue {eigenvalue:.3e}")]
    NotPsd { eigenvalue: f64 },
    #[error("matrix is singular to working precision (pivot ratio {ratio:.3e})")]
    Singular { ratio: f64 },
    #[error("matrix text format: {0}")]
    Parse(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, LinalgError>;

/// Row-major dense matrix of 64-bit floats.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(LinalgError::BadLength {
                rows,
                cols,
                len: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`DenseMatrix::new`] but also rejects NaN/Inf entries.
    pub fn from_finite(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        let m = Self::new(rows, cols, data)?;
        m.check_finite()?;
        Ok(m)
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

    pub fn from_diag(diag: &[f64]) -> Self {
        let n = diag.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in diag.iter().enumerate() {
            m.data[i * n + i] = v;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(LinalgError::ShapeMismatch {
                    op: "from_rows",
                    left: (r, c),
                    right: (1, row.len()),
                });
            }
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    /// `n × 1` matrix holding `v`.
    pub fn column(v: &[f64]) -> Self {
        Self {
            rows: v.len(),
            cols: 1,
            data: v.to_vec(),
        }
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn col(&self, j: usize) -> DenseVector {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn diag(&self) -> DenseVector {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).collect()
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            Some(p) => Err(LinalgError::NonFinite {
                row: p / self.cols.max(1),
                col: p % self.cols.max(1),
            }),
            None => Ok(()),
        }
    }

    pub fn transpose(&self) -> Self {
        let mut out = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let b_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · rhs` without materializing the transpose.
    pub fn t_matmul(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "t_matmul",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.cols, rhs.cols);
        for r in 0..self.rows {
            let a_row = self.row(r);
            let b_row = rhs.row(r);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · rhsᵀ`.
    pub fn matmul_t(&self, rhs: &Self) -> Result<Self> {
        if self.cols != rhs.cols {
            return Err(LinalgError::ShapeMismatch {
                op: "matmul_t",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, rhs.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..rhs.rows {
                out.data[i * rhs.rows + j] = dot(a, rhs.row(j));
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<DenseVector> {
        if self.cols != v.len() {
            return Err(LinalgError::ShapeMismatch {
                op: "matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// `selfᵀ · v`.
    pub fn t_matvec(&self, v: &[f64]) -> Result<DenseVector> {
        if self.rows != v.len() {
            return Err(LinalgError::ShapeMismatch {
                op: "t_matvec",
                left: self.shape(),
                right: (v.len(), 1),
            });
        }
        let mut out = vec![0.0; self.cols];
        for (i, &vi) in v.iter().enumerate() {
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        Ok(out)
    }

    fn zip_with(&self, rhs: &Self, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape() != rhs.shape() {
            return Err(LinalgError::ShapeMismatch {
                op,
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&rhs.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "add", |a, b| a + b)
    }

    pub fn sub(&self, rhs: &Self) -> Result<Self> {
        self.zip_with(rhs, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * c).collect(),
        }
    }

    /// Adds `eps` to the diagonal in place.
    pub fn add_diag(&mut self, eps: f64) {
        for i in 0..self.rows.min(self.cols) {
            self.data[i * self.cols + i] += eps;
        }
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// `(1/n)·selfᵀ·self` for an `n × d` sample matrix.
    pub fn second_moment(&self) -> DenseMatrix {
        let n = self.rows.max(1) as f64;
        self.t_matmul(self)
            .expect("t_matmul of a matrix with itself")
            .scale(1.0 / n)
    }

    /// `(1/n)·selfᵀ·other` for sample matrices with matching row counts.
    pub fn cross_moment(&self, other: &Self) -> Result<DenseMatrix> {
        let n = self.rows.max(1) as f64;
        Ok(self.t_matmul(other)?.scale(1.0 / n))
    }

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |i, j| self.get(i, idx[j]))
    }

    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Self {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Horizontal concatenation `[self | rhs]`.
    pub fn hstack(&self, rhs: &Self) -> Result<Self> {
        if self.rows != rhs.rows {
            return Err(LinalgError::ShapeMismatch {
                op: "hstack",
                left: self.shape(),
                right: rhs.shape(),
            });
        }
        Ok(Self::from_fn(self.rows, self.cols + rhs.cols, |i, j| {
            if j < self.cols {
                self.get(i, j)
            } else {
                rhs.get(i, j - self.cols)
            }
        }))
    }

    pub fn symmetry_deviation(&self) -> f64 {
        let mut dev = 0.0_f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                dev = dev.max((self.get(i, j) - self.get(j, i)).abs());
            }
        }
        dev
    }

    pub(crate) fn to_na(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_na(m: &DMatrix<f64>) -> Self {
        Self::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }

    /// Writes the plain-text form: a `rows cols` header then one line per row,
    /// 17 significant digits per entry.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{} {}", self.rows, self.cols)?;
        let mut line = String::new();
        for i in 0..self.rows {
            line.clear();
            for (j, v) in self.row(i).iter().enumerate() {
                if j > 0 {
                    line.push(' ');
                }
                write!(line, "{v:.16e}").expect("write to String");
            }
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_text<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| LinalgError::Parse("missing header".into()))??;
        let dims: Vec<usize> = header
            .split_whitespace()
            .map(|t| t.parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| LinalgError::Parse(format!("bad header {header:?}: {e}")))?;
        let [rows, cols] = dims[..] else {
            return Err(LinalgError::Parse(format!("bad header {header:?}")));
        };
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let line = lines
                .next()
                .ok_or_else(|| LinalgError::Parse(format!("missing row {i}")))??;
            let before = data.len();
            for tok in line.split_whitespace() {
                data.push(
                    tok.parse::<f64>()
                        .map_err(|e| LinalgError::Parse(format!("row {i}: {e}")))?,
                );
            }
            if data.len() - before != cols {
                return Err(LinalgError::Parse(format!(
                    "row {i} has {} entries, expected {cols}",
                    data.len() - before
                )));
            }
        }
        Self::new(rows, cols, data)
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm2(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin SVD with singular values sorted in descending order.
#[derive(Clone, Debug, PartialEq)]
pub struct SvdResult {
    /// `m × k` left singular vectors, `k = min(m, n)`.
    pub u: DenseMatrix,
    pub s: DenseVector,
    /// `k × n` right singular vectors, transposed.
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn rank_tol(&self, tol: f64) -> usize {
        self.s.iter().filter(|&&s| s > tol).count()
    }

    /// First `d` columns of `u`.
    pub fn left_basis(&self, d: usize) -> DenseMatrix {
        self.u.select_columns(&(0..d).collect::<Vec<_>>())
    }

    /// First `d` right singular vectors as columns.
    pub fn right_basis(&self, d: usize) -> DenseMatrix {
        DenseMatrix::from_fn(self.vt.cols(), d, |i, j| self.vt.get(j, i))
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        truncate(self, self.s.len()).expect("full-rank truncation")
    }
}

/// Singular value decomposition with the deterministic sign rule: the
/// largest-magnitude entry of each left singular vector is non-negative
/// (ties resolved toward the lowest index).
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    a.check_finite()?;
    let (m, n) = a.shape();
    let k = m.min(n);
    if k == 0 || a.max_abs() == 0.0 {
        return Ok(SvdResult {
            u: DenseMatrix::from_fn(m, k, |i, j| if i == j { 1.0 } else { 0.0 }),
            s: vec![0.0; k],
            vt: DenseMatrix::from_fn(k, n, |i, j| if i == j { 1.0 } else { 0.0 }),
        });
    }
    let mat = faer::Mat::<f64>::from_fn(m, n, |i, j| a.get(i, j));
    let dec = mat.thin_svd().map_err(|_| LinalgError::SvdNoConvergence)?;
    let u_f = dec.U();
    let v_f = dec.V();
    let s_f = dec.S().column_vector();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&i, &j| s_f[j].total_cmp(&s_f[i]).then(i.cmp(&j)));

    let mut u = DenseMatrix::zeros(m, k);
    let mut vt = DenseMatrix::zeros(k, n);
    let mut s = Vec::with_capacity(k);
    for (dst, &src) in order.iter().enumerate() {
        s.push(s_f[src].max(0.0));
        let mut pivot = 0usize;
        let mut best = -1.0_f64;
        for i in 0..m {
            let v = u_f[(i, src)].abs();
            if v > best {
                best = v;
                pivot = i;
            }
        }
        let sign = if u_f[(pivot, src)] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..m {
            u.set(i, dst, sign * u_f[(i, src)]);
        }
        for j in 0..n {
            vt.set(dst, j, sign * v_f[(j, src)]);
        }
    }
    Ok(SvdResult { u, s, vt })
}

/// Rank-`d` truncation `Σ_{i≤d} s_i u_i v_iᵀ`.
pub fn truncate(svd: &SvdResult, d: usize) -> Result<DenseMatrix> {
    let k = svd.s.len();
    if d > k {
        return Err(LinalgError::RankTooLarge { d, max: k });
    }
    let (m, n) = (svd.u.rows(), svd.vt.cols());
    let mut out = DenseMatrix::zeros(m, n);
    for r in 0..d {
        let s = svd.s[r];
        for i in 0..m {
            let us = svd.u.get(i, r) * s;
            if us == 0.0 {
                continue;
            }
            let row = out.row_mut(i);
            for (o, &v) in row.iter_mut().zip(svd.vt.row(r)) {
                *o += us * v;
            }
        }
    }
    Ok(out)
}

/// Spectral norm (largest singular value).
pub fn op_norm(a: &DenseMatrix) -> Result<f64> {
    Ok(svd(a)?.s.first().copied().unwrap_or(0.0))
}

pub fn singular_values(a: &DenseMatrix) -> Result<DenseVector> {
    Ok(svd(a)?.s)
}

/// Max-entry deviation of `BᵀB` from the identity.
pub fn orthonormality_deviation(basis: &DenseMatrix) -> f64 {
    let g = basis.t_matmul(basis).expect("gram");
    let mut dev = 0.0_f64;
    for i in 0..g.rows() {
        for j in 0..g.cols() {
            let target = if i == j { 1.0 } else { 0.0 };
            dev = dev.max((g.get(i, j) - target).abs());
        }
    }
    dev
}

/// `‖P_A − P_B‖₂` for orthonormal bases `A`, `B` sharing an ambient dimension.
pub fn subspace_distance(basis_a: &DenseMatrix, basis_b: &DenseMatrix) -> Result<f64> {
    if basis_a.rows() != basis_b.rows() {
        return Err(LinalgError::ShapeMismatch {
            op: "subspace_distance",
            left: basis_a.shape(),
            right: basis_b.shape(),
        });
    }
    for b in [basis_a, basis_b] {
        let deviation = orthonormality_deviation(b);
        if deviation > 1e-8 {
            return Err(LinalgError::NotOrthonormal { deviation });
        }
    }
    let pa = basis_a.matmul_t(basis_a)?;
    let pb = basis_b.matmul_t(basis_b)?;
    op_norm(&pa.sub(&pb)?)
}

/// Eigendecomposition of a symmetric matrix, eigenvalues descending.
#[derive(Clone, Debug)]
pub struct SymEig {
    pub values: DenseVector,
    /// Eigenvectors as columns.
    pub vectors: DenseMatrix,
}

fn check_symmetric(m: &DenseMatrix) -> Result<()> {
    if m.rows() != m.cols() {
        return Err(LinalgError::ShapeMismatch {
            op: "symmetric",
            left: m.shape(),
            right: (m.cols(), m.rows()),
        });
    }
    let deviation = m.symmetry_deviation();
    if deviation > 1e-8 * m.max_abs().max(1.0) {
        return Err(LinalgError::NotSymmetric { deviation });
    }
    Ok(())
}

pub fn sym_eig(m: &DenseMatrix) -> Result<SymEig> {
    check_symmetric(m)?;
    m.check_finite()?;
    let n = m.rows();
    let mut sym = m.to_na();
    // exact symmetry so the solver sees a self-adjoint input
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (sym[(i, j)] + sym[(j, i)]);
            sym[(i, j)] = v;
            sym[(j, i)] = v;
        }
    }
    let max_iter = 200 * n.max(10);
    let dec = SymmetricEigen::try_new(sym, f64::EPSILON, max_iter).ok_or(
        LinalgError::EigNoConvergence {
            iterations: max_iter,
        },
    )?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        dec.eigenvalues[j]
            .total_cmp(&dec.eigenvalues[i])
            .then(i.cmp(&j))
    });
    let values = order.iter().map(|&i| dec.eigenvalues[i]).collect();
    let vectors = DenseMatrix::from_fn(n, n, |i, j| dec.eigenvectors[(i, order[j])]);
    Ok(SymEig { values, vectors })
}

fn spectral_fn(eig: &SymEig, f: impl Fn(f64) -> f64) -> DenseMatrix {
    let n = eig.values.len();
    let mut out = DenseMatrix::zeros(n, n);
    for (k, &lam) in eig.values.iter().enumerate() {
        let w = f(lam);
        for i in 0..n {
            let vi = eig.vectors.get(i, k) * w;
            if vi == 0.0 {
                continue;
            }
            for j in 0..n {
                out.data[i * n + j] += vi * eig.vectors.get(j, k);
            }
        }
    }
    // symmetrize round-off
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (out.get(i, j) + out.get(j, i));
            out.set(i, j, v);
            out.set(j, i, v);
        }
    }
    out
}

/// `(m + eps·I)^{-1/2}` for symmetric `m`.
pub fn sym_inv_sqrt(m: &DenseMatrix, eps: f64) -> Result<DenseMatrix> {
    let eig = sym_eig(m)?;
    if let Some(&lam) = eig.values.iter().find(|&&l| l + eps <= 0.0) {
        return Err(LinalgError::NotPsd {
            eigenvalue: lam + eps,
        });
    }
    Ok(spectral_fn(&eig, |l| 1.0 / (l + eps).sqrt()))
}

/// `(m + eps·I)^{1/2}` for symmetric positive semidefinite `m`. Eigenvalues
/// that are negative only by round-off are clamped to zero.
pub fn sym_sqrt(m: &DenseMatrix, eps: f64) -> Result<DenseMatrix> {
    let eig = sym_eig(m)?;
    let scale = eig.values.first().copied().unwrap_or(0.0).abs().max(1.0);
    if let Some(&lam) = eig.values.iter().find(|&&l| l + eps < -1e-10 * scale) {
        return Err(LinalgError::NotPsd {
            eigenvalue: lam + eps,
        });
    }
    Ok(spectral_fn(&eig, |l| (l + eps).max(0.0).sqrt()))
}

/// Solves `(m + eps·I)·x = rhs` by partial-pivot LU.
pub fn ridge_solve(m: &DenseMatrix, rhs: &DenseMatrix, eps: f64) -> Result<DenseMatrix> {
    let n = m.rows();
    if m.cols() != n || rhs.rows() != n {
        return Err(LinalgError::ShapeMismatch {
            op: "ridge_solve",
            left: m.shape(),
            right: rhs.shape(),
        });
    }
    m.check_finite()?;
    rhs.check_finite()?;
    let mut a = m.to_na();
    for i in 0..n {
        a[(i, i)] += eps;
    }
    let lu = a.lu();
    let u = lu.u();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0_f64);
    for i in 0..n {
        let p = u[(i, i)].abs();
        lo = lo.min(p);
        hi = hi.max(p);
    }
    let ratio = if hi > 0.0 { lo / hi } else { 0.0 };
    if n > 0 && ratio <= (n as f64) * f64::EPSILON {
        return Err(LinalgError::Singular { ratio });
    }
    let x = lu
        .solve(&rhs.to_na())
        .ok_or(LinalgError::Singular { ratio })?;
    Ok(DenseMatrix::from_na(&x))
}

/// Vector convenience wrapper around [`ridge_solve`].
pub fn ridge_solve_vec(m: &DenseMatrix, rhs: &[f64], eps: f64) -> Result<DenseVector> {
    Ok(ridge_solve(m, &DenseMatrix::column(rhs), eps)?.into_data())
}

/// Orthonormal factor of a QR decomposition with `diag(R) > 0`.
pub fn qr_orthogonal(a: &DenseMatrix) -> Result<DenseMatrix> {
    a.check_finite()?;
    let qr = a.to_na().qr();
    let q = qr.q();
    let r = qr.r();
    let k = q.ncols();
    Ok(DenseMatrix::from_fn(q.nrows(), k, |i, j| {
        let s = if r[(j, j)] < 0.0 { -1.0 } else { 1.0 };
        s * q[(i, j)]
    }))
}
