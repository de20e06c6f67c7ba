//! Dense row-major matrices and the symmetric kernels the rest of the crate
//! is built on: Cholesky factorization, log-determinants, SPD solves and a
//! cyclic Jacobi eigenvalue solver.
//!
//! Everything is `f64`. Matrices are small (P ≤ a few hundred), so the
//! kernels are plain loops ordered for row-major access.

use std::fmt;
use std::ops::{Deref, Index, IndexMut};

use crate::error::{Error, Result};

/// Dense row-major matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
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
    /// Builds a matrix from row-major data, rejecting bad lengths and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::shape(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "entry ({}, {}) = {}",
                pos / cols.max(1),
                pos % cols.max(1),
                data[pos]
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, |row| row.len());
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::shape("ragged rows"));
        }
        Self::new(
            r,
            c,
            rows.iter().flat_map(|row| row.iter().copied()).collect(),
        )
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
        for (i, &d) in diag.iter().enumerate() {
            m.data[i * n + i] = d;
        }
        m
    }

    /// Builds a matrix whose columns are the given slices.
    pub fn from_columns(columns: &[&[f64]]) -> Result<Self> {
        let c = columns.len();
        let r = columns.first().map_or(0, |col| col.len());
        if columns.iter().any(|col| col.len() != r) {
            return Err(Error::shape("columns of unequal length"));
        }
        let mut data = vec![0.0; r * c];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                data[i * c + j] = v;
            }
        }
        Self::new(r, c, data)
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.data[i * self.cols + j])
            .collect()
    }

    /// Selects a subset of columns, in the given order.
    pub fn select_columns(&self, indices: &[usize]) -> Matrix {
        let mut out = Matrix::zeros(self.rows, indices.len());
        for i in 0..self.rows {
            let src = self.row(i);
            let dst = &mut out.data[i * indices.len()..(i + 1) * indices.len()];
            for (d, &j) in dst.iter_mut().zip(indices) {
                *d = src[j];
            }
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix::from_vec_unchecked(
            self.rows,
            self.cols,
            self.data.iter().map(|v| v * s).collect(),
        )
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.zip_with(other, |a, b| a - b)
    }

    fn zip_with(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
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
        Ok(Matrix::from_vec_unchecked(self.rows, self.cols, data))
    }

    /// `self * a + other * b`, elementwise.
    pub(crate) fn lincomb(&self, a: f64, other: &Matrix, b: f64) -> Matrix {
        debug_assert_eq!(self.shape(), other.shape());
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&x, &y)| a * x + b * y)
            .collect();
        Matrix::from_vec_unchecked(self.rows, self.cols, data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diag(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols))
            .map(|i| self[(i, i)])
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest `|a_ij - a_ji|`.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Row means; for a `P x N` sample matrix this is the sample mean vector.
    pub fn column_mean(&self) -> Vector {
        let n = self.cols.max(1) as f64;
        Vector::from_vec_unchecked(
            (0..self.rows)
                .map(|i| self.row(i).iter().sum::<f64>() / n)
                .collect(),
        )
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        matmul(self, other)
    }

    /// `self * other^T` without materializing the transpose.
    pub fn matmul_transb(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::shape(format!(
                "A*B^T with A {:?}, B {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a, other.row(j));
            }
        }
        Ok(out)
    }

    /// `self^T * other` without materializing the transpose.
    pub fn matmul_transa(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::shape(format!(
                "A^T*B with A {:?}, B {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a = self.row(k);
            let b = other.row(k);
            for (i, &aki) in a.iter().enumerate() {
                if aki == 0.0 {
                    continue;
                }
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, &bkj) in dst.iter_mut().zip(b) {
                    *d += aki * bkj;
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != self.cols {
            return Err(Error::shape(format!(
                "matvec {:?} by vector of length {}",
                self.shape(),
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

/// Dense vector of finite values.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} = {}", data[pos])));
        }
        Ok(Self(data))
    }

    pub(crate) fn from_vec_unchecked(data: Vec<f64>) -> Self {
        Self(data)
    }

    pub fn zeros(n: usize) -> Self {
        Self(vec![0.0; n])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub(crate) fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    pub fn norm(&self) -> f64 {
        dot(&self.0, &self.0).sqrt()
    }
}

impl Deref for Vector {
    type Target = [f64];

    fn deref(&self) -> &[f64] {
        &self.0
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Standard matrix product.
pub fn matmul(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols != b.rows {
        return Err(Error::shape(format!(
            "matmul {:?} by {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = Matrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        let dst = &mut out.data[i * b.cols..(i + 1) * b.cols];
        for (k, &aik) in a.row(i).iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            for (d, &bkj) in dst.iter_mut().zip(b.row(k)) {
                *d += aik * bkj;
            }
        }
    }
    Ok(out)
}

/// `(a + a^T) / 2`. The result is exactly symmetric.
pub fn symmetrize(a: &Matrix) -> Result<Matrix> {
    require_square(a, "symmetrize")?;
    let n = a.rows;
    let mut out = a.clone();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (a[(i, j)] + a[(j, i)]);
            out[(i, j)] = v;
            out[(j, i)] = v;
        }
    }
    Ok(out)
}

/// `a + eps * I`.
pub fn add_scaled_identity(a: &Matrix, eps: f64) -> Result<Matrix> {
    require_square(a, "add_scaled_identity")?;
    if !(eps >= 0.0 && eps.is_finite()) {
        return Err(Error::invalid(format!(
            "diagonal perturbation must be >= 0, got {eps}"
        )));
    }
    let mut out = a.clone();
    for i in 0..a.rows {
        out[(i, i)] += eps;
    }
    Ok(out)
}

fn require_square(a: &Matrix, what: &str) -> Result<()> {
    if a.is_square() {
        Ok(())
    } else {
        Err(Error::shape(format!(
            "{what} needs a square matrix, got {:?}",
            a.shape()
        )))
    }
}

/// Lower Cholesky factor `L` with `L L^T = A`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Matrix,
}

impl Cholesky {
    /// Factors `a` reading only its lower triangle. Fails when a pivot is
    /// `<= 0`.
    pub fn factor(a: &Matrix) -> Result<Self> {
        Self::factor_with_floor(a, 0.0)
    }

    /// Like [`Cholesky::factor`] but rejects any pivot `<= floor`.
    pub fn factor_with_floor(a: &Matrix, floor: f64) -> Result<Self> {
        require_square(a, "cholesky")?;
        let n = a.rows;
        let mut l = Matrix::zeros(n, n);
        for j in 0..n {
            let lj = &l.data[j * n..j * n + j];
            let d = a[(j, j)] - dot(lj, lj);
            if !(d > floor) || !d.is_finite() {
                return Err(Error::NotPositiveDefinite { index: j, pivot: d });
            }
            let djj = d.sqrt();
            l.data[j * n + j] = djj;
            for i in (j + 1)..n {
                let (head, tail) = l.data.split_at_mut(i * n);
                let li = &tail[..j];
                let lj = &head[j * n..j * n + j];
                let s = a[(i, j)] - dot(li, lj);
                tail[j] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn lower(&self) -> &Matrix {
        &self.l
    }

    pub fn into_lower(self) -> Matrix {
        self.l
    }

    pub fn dim(&self) -> usize {
        self.l.rows
    }

    /// `log det A = 2 sum log L_ii`.
    pub fn logdet(&self) -> f64 {
        2.0 * (0..self.dim()).map(|i| self.l[(i, i)].ln()).sum::<f64>()
    }

    /// Solves `A X = B` by forward then back substitution.
    pub fn solve(&self, b: &Matrix) -> Result<Matrix> {
        let n = self.dim();
        if b.rows != n {
            return Err(Error::shape(format!(
                "solve with {n}x{n} factor and rhs {:?}",
                b.shape()
            )));
        }
        let m = b.cols;
        let l = &self.l;
        let mut x = b.clone();
        // L Y = B
        for i in 0..n {
            for k in 0..i {
                let lik = l[(i, k)];
                if lik == 0.0 {
                    continue;
                }
                let (head, tail) = x.data.split_at_mut(i * m);
                let src = &head[k * m..(k + 1) * m];
                for (d, &s) in tail[..m].iter_mut().zip(src) {
                    *d -= lik * s;
                }
            }
            let inv = 1.0 / l[(i, i)];
            for d in &mut x.data[i * m..(i + 1) * m] {
                *d *= inv;
            }
        }
        // L^T X = Y
        for i in (0..n).rev() {
            for k in (i + 1)..n {
                let lki = l[(k, i)];
                if lki == 0.0 {
                    continue;
                }
                let (head, tail) = x.data.split_at_mut(k * m);
                let src = &tail[..m];
                for (d, &s) in head[i * m..(i + 1) * m].iter_mut().zip(src) {
                    *d -= lki * s;
                }
            }
            let inv = 1.0 / l[(i, i)];
            for d in &mut x.data[i * m..(i + 1) * m] {
                *d *= inv;
            }
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix {
        let inv = self
            .solve(&Matrix::identity(self.dim()))
            .expect("identity rhs matches factor dimension");
        symmetrize(&inv).expect("square")
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive-definite matrix.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    Cholesky::factor(a).map(Cholesky::into_lower)
}

pub fn logdet_spd(a: &Matrix) -> Result<f64> {
    Ok(Cholesky::factor(a)?.logdet())
}

pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    Cholesky::factor(a)?.solve(b)
}

pub fn inverse_spd(a: &Matrix) -> Result<Matrix> {
    Ok(Cholesky::factor(a)?.inverse())
}

/// Runs `f(eps)`, retrying with `eps` multiplied by 10 up to three times
/// when it reports a non-positive-definite matrix. Returns the value and the
/// perturbation that finally succeeded.
pub fn with_jitter_escalation<T>(
    eps: f64,
    mut f: impl FnMut(f64) -> Result<T>,
) -> Result<(T, f64)> {
    let mut current = eps;
    let mut last_err = None;
    for attempt in 0..=3 {
        match f(current) {
            Ok(v) => {
                if attempt > 0 {
                    log::warn!(
                        "positive-definiteness restored with eps = {current:e} (requested {eps:e})"
                    );
                }
                return Ok((v, current));
            }
            Err(e @ Error::NotPositiveDefinite { .. }) => {
                log::warn!("{e}; escalating eps from {current:e}");
                last_err = Some(e);
                current = if current > 0.0 { current * 10.0 } else { 1e-12 };
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.expect("loop ran at least once"))
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix, sorted descending, via cyclic Jacobi
/// rotations.
pub fn sym_eigenvalues(a: &Matrix) -> Result<Vector> {
    require_square(a, "sym_eigenvalues")?;
    let n = a.rows;
    let fro = a.frobenius_norm();
    if a.asymmetry() > 1e-9 * fro.max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(format!(
            "matrix is not symmetric (max asymmetry {:e})",
            a.asymmetry()
        )));
    }
    let mut m = symmetrize(a)?;
    let tol = 1e-12 * fro;

    let off_norm = |m: &Matrix| -> f64 {
        let mut s = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                s += 2.0 * m[(i, j)] * m[(i, j)];
            }
        }
        s.sqrt()
    };

    for _ in 0..JACOBI_MAX_SWEEPS {
        if off_norm(&m) <= tol {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let app = m[(p, p)];
                let aqq = m[(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let mkp = m[(k, p)];
                    let mkq = m[(k, q)];
                    m[(k, p)] = c * mkp - s * mkq;
                    m[(k, q)] = s * mkp + c * mkq;
                }
                for k in 0..n {
                    let mpk = m[(p, k)];
                    let mqk = m[(q, k)];
                    m[(p, k)] = c * mpk - s * mqk;
                    m[(q, k)] = s * mpk + c * mqk;
                }
                m[(p, q)] = 0.0;
                m[(q, p)] = 0.0;
            }
        }
    }

    let mut eig = m.diag();
    eig.sort_by(|x, y| y.total_cmp(x));
    Ok(Vector::from_vec_unchecked(eig))
}
