//! Dense matrices, singular value decomposition and rank-k factor pairs.
//!
//! The SVD is a one-sided (Hestenes) Jacobi iteration. It is slower than
//! Golub-Kahan for large inputs but it is short, fully deterministic for a
//! fixed input, and delivers singular values with high relative accuracy,
//! which is what the truncation-noise bookkeeping downstream relies on.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Off-diagonal tolerance for the Jacobi sweeps.
pub const SVD_TOLERANCE: f64 = 1e-12;

/// Dense real matrix stored row-major.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMatrix", into = "RawMatrix")]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl TryFrom<RawMatrix> for Matrix {
    type Error = Error;

    fn try_from(raw: RawMatrix) -> Result<Self> {
        Matrix::new(raw.rows, raw.cols, raw.data)
    }
}

impl From<Matrix> for RawMatrix {
    fn from(m: Matrix) -> Self {
        RawMatrix {
            rows: m.rows,
            cols: m.cols,
            data: m.data,
        }
    }
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for i in 0..self.rows {
            writeln!(f, "  {:?}", self.row(i))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    /// Build a matrix from row-major data, rejecting bad shapes and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!(
                "matrix dimensions must be positive, got {rows}x{cols}"
            )));
        }
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix {rows}x{cols} needs {} entries, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite entry {} at ({}, {})",
                data[pos],
                pos / cols,
                pos % cols
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::invalid("ragged rows"));
        }
        Matrix::new(n, m, rows.concat())
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "matrix dimensions must be positive");
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn diag(values: &[f64]) -> Result<Self> {
        let n = values.len();
        let mut data = vec![0.0; n * n];
        for (i, v) in values.iter().enumerate() {
            data[i * n + i] = *v;
        }
        Matrix::new(n, n, data)
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Matrix { rows, cols, data }
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub(crate) fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_error("matmul", self, other));
        }
        let mut out = vec![0.0; self.rows * other.cols];
        for i in 0..self.rows {
            let out_row = &mut out[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(Matrix {
            rows: self.rows,
            cols: other.cols,
            data: out,
        })
    }

    /// `self · otherᵀ`
    pub fn matmul_transposed(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_error("matmul_transposed", self, other));
        }
        Ok(Matrix::from_fn(self.rows, other.rows, |i, j| {
            dot(self.row(i), other.row(j))
        }))
    }

    /// `self · x`
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::invalid(format!(
                "matvec: matrix is {}x{} but vector has length {}",
                self.rows,
                self.cols,
                x.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), x)).collect())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "add", |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, "sub", |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Matrix {
        self.map(|v| v * c)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_with(&self, other: &Matrix, op: &str, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(shape_error(op, self, other));
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Flattened inner product `Σ_ij a_ij b_ij`.
    pub fn inner(&self, other: &Matrix) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(shape_error("inner", self, other));
        }
        Ok(dot(&self.data, &other.data))
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn is_zero(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0)
    }

    /// Rank-one update `self += alpha · u vᵀ`.
    pub(crate) fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, &ui) in u.iter().enumerate() {
            let s = alpha * ui;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (x, &vj) in row.iter_mut().zip(v) {
                *x += s * vj;
            }
        }
    }
}

fn shape_error(op: &str, a: &Matrix, b: &Matrix) -> Error {
    Error::invalid(format!(
        "{op}: shape mismatch {}x{} vs {}x{}",
        a.rows, a.cols, b.rows, b.cols
    ))
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Thin SVD `a = u · diag(s) · vᵀ`.
#[derive(Debug, Clone, PartialEq)]
pub struct SvdResult {
    /// N×r, orthonormal columns.
    pub u: Matrix,
    /// r values, non-increasing, non-negative.
    pub s: Vec<f64>,
    /// M×r, orthonormal columns.
    pub v: Matrix,
}

impl SvdResult {
    pub fn full_rank(&self) -> usize {
        self.s.len()
    }

    /// `sqrt(Σ_{i>k} σ_i²)`, the Frobenius residual of the best rank-k
    /// approximation.
    pub fn tail_norm(&self, k: usize) -> f64 {
        norm(&self.s[k.min(self.s.len())..])
    }

    pub fn reconstruct(&self) -> Matrix {
        let mut out = Matrix::zeros(self.u.rows, self.v.rows);
        for (j, &sigma) in self.s.iter().enumerate() {
            out.add_outer(sigma, &self.u.column(j), &self.v.column(j));
        }
        out
    }
}

/// Rank-k factorization `W ≈ L Rᵀ` with the singular values folded into `L`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorPair {
    pub l: Matrix,
    pub r: Matrix,
}

impl FactorPair {
    pub fn new(l: Matrix, r: Matrix) -> Result<Self> {
        if l.cols != r.cols {
            return Err(Error::invalid(format!(
                "factor ranks disagree: L has {} columns, R has {}",
                l.cols, r.cols
            )));
        }
        Ok(FactorPair { l, r })
    }

    pub fn rank(&self) -> usize {
        self.l.cols
    }

    /// Shape of `L Rᵀ`.
    pub fn product_shape(&self) -> (usize, usize) {
        (self.l.rows, self.r.rows)
    }

    pub fn product(&self) -> Matrix {
        self.l
            .matmul_transposed(&self.r)
            .expect("factor ranks agree by construction")
    }

    /// `N·k + M·k`
    pub fn param_count(&self) -> usize {
        (self.l.rows + self.r.rows) * self.rank()
    }
}

/// Factorization noise `δ = L Rᵀ − W`.
#[derive(Debug, Clone, PartialEq)]
pub struct Noise {
    pub delta: Matrix,
    pub max_abs: f64,
    pub fro: f64,
}

/// One-sided Jacobi SVD.
///
/// Sign convention: the first entry of each `u` column whose magnitude
/// exceeds 1e-12 is non-negative.
pub fn svd(a: &Matrix) -> Result<SvdResult> {
    if let Some(v) = a.data.iter().find(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("svd: non-finite entry {v}")));
    }
    let transposed = a.rows < a.cols;
    let work = if transposed { a.transpose() } else { a.clone() };
    let (mut u, s, mut v) = jacobi_tall(&work)?;
    if transposed {
        std::mem::swap(&mut u, &mut v);
    }
    for j in 0..s.len() {
        let pivot = (0..u.rows)
            .map(|i| u.get(i, j))
            .find(|x| x.abs() > 1e-12)
            .unwrap_or(0.0);
        if pivot < 0.0 {
            for i in 0..u.rows {
                u.set(i, j, -u.get(i, j));
            }
            for i in 0..v.rows {
                v.set(i, j, -v.get(i, j));
            }
        }
    }
    Ok(SvdResult { u, s, v })
}

/// Jacobi SVD for `rows >= cols`. Returns (u, s, v) with u rows×n, v n×n.
fn jacobi_tall(a: &Matrix) -> Result<(Matrix, Vec<f64>, Matrix)> {
    let (m, n) = a.shape();
    let mut cols: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut vcols: Vec<Vec<f64>> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let scale = a.frobenius_norm();
    let negligible = f64::EPSILON * scale;
    let max_sweeps = 100 * n;
    let mut converged = n < 2;
    let mut residual = 0.0;
    let mut sweeps = 0;

    while !converged && sweeps < max_sweeps {
        sweeps += 1;
        residual = 0.0f64;
        let mut rotated = false;
        for p in 0..n - 1 {
            for q in p + 1..n {
                let alpha = dot(&cols[p], &cols[p]);
                let beta = dot(&cols[q], &cols[q]);
                if alpha.sqrt() <= negligible || beta.sqrt() <= negligible {
                    continue;
                }
                let gamma = dot(&cols[p], &cols[q]);
                let off = gamma.abs() / (alpha * beta).sqrt();
                residual = residual.max(off);
                if off <= SVD_TOLERANCE {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut cols, p, q, c, s);
                rotate(&mut vcols, p, q, c, s);
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Convergence { sweeps, residual });
    }

    let mut sigma: Vec<f64> = cols.iter().map(|c| norm(c)).collect();
    let floor = (m.max(n) as f64) * negligible;
    for s in sigma.iter_mut() {
        if *s <= floor {
            *s = 0.0;
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| sigma[j].total_cmp(&sigma[i]).then(i.cmp(&j)));

    let mut ucols: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut zero_slots = Vec::new();
    for (slot, &j) in order.iter().enumerate() {
        if sigma[j] > 0.0 {
            ucols.push(cols[j].iter().map(|x| x / sigma[j]).collect());
        } else {
            ucols.push(vec![0.0; m]);
            zero_slots.push(slot);
        }
    }
    complete_orthonormal(&mut ucols, &zero_slots);

    let u = Matrix::from_fn(m, n, |i, j| ucols[j][i]);
    let v = Matrix::from_fn(n, n, |i, j| vcols[order[j]][i]);
    let s = order.iter().map(|&j| sigma[j]).collect();
    Ok((u, s, v))
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fill the listed (zero) columns with unit vectors orthogonal to every
/// other column, drawing candidates from the standard basis in order.
fn complete_orthonormal(cols: &mut [Vec<f64>], slots: &[usize]) {
    if slots.is_empty() {
        return;
    }
    let m = cols[0].len();
    let mut candidate = 0;
    for &slot in slots {
        loop {
            assert!(candidate < m, "cannot complete orthonormal basis");
            let mut e = vec![0.0; m];
            e[candidate] = 1.0;
            candidate += 1;
            // two passes of Gram-Schmidt
            for _ in 0..2 {
                for (k, c) in cols.iter().enumerate() {
                    if k == slot || c.iter().all(|&x| x == 0.0) {
                        continue;
                    }
                    let proj = dot(&e, c);
                    for (x, y) in e.iter_mut().zip(c) {
                        *x -= proj * y;
                    }
                }
            }
            let len = norm(&e);
            if len > 0.5 {
                cols[slot] = e.into_iter().map(|x| x / len).collect();
                break;
            }
        }
    }
}

/// Keep the leading `k` singular triplets: `L = U_k diag(S_k)`, `R = V_k`.
pub fn truncate(svd: &SvdResult, k: usize) -> Result<FactorPair> {
    let r = svd.full_rank();
    if k == 0 || k > r {
        return Err(Error::InvalidRank { rank: k, max: r });
    }
    let l = Matrix::from_fn(svd.u.rows, k, |i, j| svd.u.get(i, j) * svd.s[j]);
    let rr = Matrix::from_fn(svd.v.rows, k, |i, j| svd.v.get(i, j));
    FactorPair::new(l, rr)
}

/// `δ = L Rᵀ − W` with its max-abs entry and Frobenius norm.
pub fn noise(w: &Matrix, f: &FactorPair) -> Result<Noise> {
    if f.product_shape() != w.shape() {
        return Err(Error::invalid(format!(
            "factor product is {}x{} but weight is {}x{}",
            f.l.rows, f.r.rows, w.rows, w.cols
        )));
    }
    let delta = f.product().sub(w)?;
    Ok(Noise {
        max_abs: delta.max_abs(),
        fro: delta.frobenius_norm(),
        delta,
    })
}
