//! Dense complex linear algebra used by the filter, the load-flow matrices and
//! the WLS baseline.
//!
//! Matrices are row-major. Multiplication skips zero entries of the left
//! operand, which keeps products with 0/1 observation blocks cheap.

use std::ops::{Add, Index, IndexMut, Mul, Neg, Sub};

use num_complex::Complex;
use num_traits::{One, Zero};

use crate::error::{DseError, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq)]
pub struct CMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

impl<T: Scalar> CMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![Complex::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = Complex::one();
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row vectors; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<Complex<T>>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(DseError::shape("matrix row", cols, format!("{} (row {i})", r.len())));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(DseError::shape("matrix data", rows * cols, data.len()));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_diagonal(diag: &[Complex<T>]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, d) in diag.iter().enumerate() {
            m[(i, i)] = *d;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[Complex<T>] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [Complex<T>] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<Complex<T>> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn diagonal(&self) -> Vec<Complex<T>> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).collect()
    }

    pub fn to_rows(&self) -> Vec<Vec<Complex<T>>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, s: Complex<T>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| *z * s).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(Complex<T>) -> Complex<T>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| f(*z)).collect(),
        }
    }

    pub fn trace(&self) -> Complex<T> {
        self.diagonal().into_iter().fold(Complex::zero(), |a, b| a + b)
    }

    pub fn max_abs(&self) -> T {
        self.data.iter().fold(T::zero(), |m, z| m.max(z.norm()))
    }

    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
    }

    /// `self · rhs`.
    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(self.cols, rhs.rows, "matmul inner dimension");
        let mut out = Self::zeros(self.rows, rhs.cols);
        let n = rhs.cols;
        for i in 0..self.rows {
            let out_row = &mut out.data[i * n..(i + 1) * n];
            for (k, a) in self.row(i).iter().enumerate() {
                if a.re.is_zero() && a.im.is_zero() {
                    continue;
                }
                let a = *a;
                let b_row = &rhs.data[k * n..(k + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    o.re = o.re + a.re * b.re - a.im * b.im;
                    o.im = o.im + a.re * b.im + a.im * b.re;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[Complex<T>]) -> Vec<Complex<T>> {
        assert_eq!(self.cols, v.len(), "mul_vec dimension");
        (0..self.rows)
            .map(|i| {
                self.row(i)
                    .iter()
                    .zip(v)
                    .fold(Complex::zero(), |acc, (a, b)| acc + *a * *b)
            })
            .collect()
    }

    /// New matrix made of the listed rows, in the listed order.
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

    pub fn select_columns(&self, idx: &[usize]) -> Self {
        Self::from_fn(self.rows, idx.len(), |i, j| self[(i, idx[j])])
    }

    /// Copies out the `nr × nc` block starting at `(r0, c0)`.
    pub fn block(&self, r0: usize, c0: usize, nr: usize, nc: usize) -> Self {
        Self::from_fn(nr, nc, |i, j| self[(r0 + i, c0 + j)])
    }

    pub fn set_block(&mut self, r0: usize, c0: usize, b: &Self) {
        for i in 0..b.rows {
            let dst = &mut self.data[(r0 + i) * self.cols + c0..(r0 + i) * self.cols + c0 + b.cols];
            dst.copy_from_slice(b.row(i));
        }
    }

    /// Assembles `[[a, b], [c, d]]`.
    pub fn from_blocks(a: &Self, b: &Self, c: &Self, d: &Self) -> Self {
        assert_eq!(a.rows, b.rows);
        assert_eq!(c.rows, d.rows);
        assert_eq!(a.cols, c.cols);
        assert_eq!(b.cols, d.cols);
        let mut m = Self::zeros(a.rows + c.rows, a.cols + b.cols);
        m.set_block(0, 0, a);
        m.set_block(0, a.cols, b);
        m.set_block(a.rows, 0, c);
        m.set_block(a.rows, a.cols, d);
        m
    }

    /// Stacks matrices with equal column count vertically.
    pub fn vstack(parts: &[&Self]) -> Result<Self> {
        let cols = parts.first().map_or(0, |p| p.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            if p.cols != cols && p.rows > 0 {
                return Err(DseError::shape("vstack", cols, p.cols));
            }
            data.extend_from_slice(&p.data);
            rows += p.rows;
        }
        Ok(Self { rows, cols, data })
    }

    /// Largest `|a_ij − conj(a_ji)|`.
    pub fn hermitian_defect(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    /// Largest `|a_ij − a_ji|`.
    pub fn symmetric_defect(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).norm());
            }
        }
        worst
    }

    /// `(A + Aᴴ) / 2`.
    pub fn hermitian_part(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)].conj()).scale(half))
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetric_part(&self) -> Self {
        let half = T::lit(0.5);
        Self::from_fn(self.rows, self.cols, |i, j| (self[(i, j)] + self[(j, i)]).scale(half))
    }

    pub fn add_diagonal(&mut self, v: Complex<T>) {
        for i in 0..self.rows.min(self.cols) {
            self[(i, i)] = self[(i, i)] + v;
        }
    }
}

impl<T> Index<(usize, usize)> for CMatrix<T> {
    type Output = Complex<T>;
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for CMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        &mut self.data[i * self.cols + j]
    }
}

impl<'a, T: Scalar> Add<&'a CMatrix<T>> for &'a CMatrix<T> {
    type Output = CMatrix<T>;
    fn add(self, rhs: &'a CMatrix<T>) -> CMatrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "add shape");
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| *a + *b).collect(),
        }
    }
}

impl<'a, T: Scalar> Sub<&'a CMatrix<T>> for &'a CMatrix<T> {
    type Output = CMatrix<T>;
    fn sub(self, rhs: &'a CMatrix<T>) -> CMatrix<T> {
        assert_eq!((self.rows, self.cols), (rhs.rows, rhs.cols), "sub shape");
        CMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| *a - *b).collect(),
        }
    }
}

impl<'a, T: Scalar> Mul<&'a CMatrix<T>> for &'a CMatrix<T> {
    type Output = CMatrix<T>;
    fn mul(self, rhs: &'a CMatrix<T>) -> CMatrix<T> {
        self.matmul(rhs)
    }
}

impl<T: Scalar> Neg for &CMatrix<T> {
    type Output = CMatrix<T>;
    fn neg(self) -> CMatrix<T> {
        self.map(|z| -z)
    }
}

/// LU factorization with partial pivoting, `P·A = L·U`.
#[derive(Clone, Debug)]
pub struct Lu<T> {
    lu: CMatrix<T>,
    perm: Vec<usize>,
}

impl<T: Scalar> Lu<T> {
    /// Fails only on an exactly zero pivot; near-singularity is reported
    /// through [`Lu::condition_estimate`].
    pub fn factor(a: &CMatrix<T>) -> Result<Self> {
        if !a.is_square() {
            return Err(DseError::shape("lu", "square matrix", format!("{}x{}", a.rows, a.cols)));
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        for k in 0..n {
            let mut p = k;
            let mut best = lu[(k, k)].norm();
            for i in k + 1..n {
                let v = lu[(i, k)].norm();
                if v > best {
                    best = v;
                    p = i;
                }
            }
            if best.is_zero() || !best.is_finite() {
                return Err(DseError::Numerical(format!("singular matrix at pivot {k}")));
            }
            if p != k {
                for j in 0..n {
                    lu.data.swap(k * n + j, p * n + j);
                }
                perm.swap(k, p);
            }
            let pivot = lu[(k, k)];
            let (upper, lower) = lu.data.split_at_mut((k + 1) * n);
            let krow = &upper[k * n..(k + 1) * n];
            for i in 0..n - k - 1 {
                let row = &mut lower[i * n..(i + 1) * n];
                let f = row[k] / pivot;
                row[k] = f;
                if f.is_zero() {
                    continue;
                }
                for j in k + 1..n {
                    row[j] = row[j] - f * krow[j];
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn dim(&self) -> usize {
        self.lu.rows
    }

    /// Ratio of largest to smallest pivot magnitude; a cheap lower bound on
    /// the 2-norm condition number.
    pub fn condition_estimate(&self) -> T {
        let d = self.lu.diagonal();
        let mx = d.iter().fold(T::zero(), |m, z| m.max(z.norm()));
        let mn = d.iter().fold(T::infinity(), |m, z| m.min(z.norm()));
        mx / mn
    }

    pub fn solve_vec(&self, b: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.dim();
        assert_eq!(b.len(), n);
        let mut x: Vec<Complex<T>> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let row = self.lu.row(i);
            let mut s = x[i];
            for j in 0..i {
                s = s - row[j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let row = self.lu.row(i);
            let mut s = x[i];
            for j in i + 1..n {
                s = s - row[j] * x[j];
            }
            x[i] = s / row[i];
        }
        x
    }

    /// Solves `A·X = B` for all columns of `B`.
    pub fn solve_mat(&self, b: &CMatrix<T>) -> CMatrix<T> {
        let n = self.dim();
        assert_eq!(b.rows, n);
        let m = b.cols;
        let mut x = b.select_rows(&self.perm);
        for i in 0..n {
            let (done, rest) = x.data.split_at_mut(i * m);
            let xi = &mut rest[..m];
            let row = self.lu.row(i);
            for (j, l) in row[..i].iter().enumerate() {
                if l.is_zero() {
                    continue;
                }
                let xj = &done[j * m..(j + 1) * m];
                for (t, s) in xi.iter_mut().zip(xj) {
                    *t = *t - *l * *s;
                }
            }
        }
        for i in (0..n).rev() {
            let (head, tail) = x.data.split_at_mut((i + 1) * m);
            let xi = &mut head[i * m..];
            let row = self.lu.row(i);
            for (off, u) in row[i + 1..].iter().enumerate() {
                if u.is_zero() {
                    continue;
                }
                let xj = &tail[off * m..(off + 1) * m];
                for (t, s) in xi.iter_mut().zip(xj) {
                    *t = *t - *u * *s;
                }
            }
            let inv = Complex::<T>::one() / row[i];
            for t in xi.iter_mut() {
                *t = *t * inv;
            }
        }
        x
    }

    pub fn inverse(&self) -> CMatrix<T> {
        self.solve_mat(&CMatrix::identity(self.dim()))
    }
}

/// Cholesky factorization `A = L·Lᴴ` of a Hermitian positive definite matrix.
#[derive(Clone, Debug)]
pub struct Cholesky<T> {
    l: CMatrix<T>,
}

impl<T: Scalar> Cholesky<T> {
    /// Fails when a pivot is not strictly positive relative to `rel_tol`
    /// times the largest diagonal entry.
    pub fn factor(a: &CMatrix<T>, rel_tol: T) -> Result<Self> {
        if !a.is_square() {
            return Err(DseError::shape("cholesky", "square matrix", format!("{}x{}", a.rows, a.cols)));
        }
        let n = a.rows;
        let scale = a.diagonal().iter().fold(T::zero(), |m, z| m.max(z.re.abs()));
        let floor = rel_tol * scale;
        let mut l = CMatrix::zeros(n, n);
        for j in 0..n {
            let mut d = a[(j, j)].re;
            for k in 0..j {
                d = d - l[(j, k)].norm_sqr();
            }
            if !(d > floor) {
                return Err(DseError::Numerical(format!("matrix not positive definite at column {j}")));
            }
            let djj = d.sqrt();
            l[(j, j)] = Complex::new(djj, T::zero());
            for i in j + 1..n {
                let mut s = a[(i, j)];
                for k in 0..j {
                    s = s - l[(i, k)] * l[(j, k)].conj();
                }
                l[(i, j)] = s.unscale(djj);
            }
        }
        Ok(Self { l })
    }

    pub fn solve_vec(&self, b: &[Complex<T>]) -> Vec<Complex<T>> {
        let n = self.l.rows;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s = s - self.l[(i, k)] * y[k];
            }
            y[i] = s.unscale(self.l[(i, i)].re);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s = s - self.l[(k, i)].conj() * y[k];
            }
            y[i] = s.unscale(self.l[(i, i)].re);
        }
        y
    }

    pub fn inverse(&self) -> CMatrix<T> {
        let n = self.l.rows;
        let mut cols = Vec::with_capacity(n);
        for j in 0..n {
            let mut e = vec![Complex::zero(); n];
            e[j] = Complex::one();
            cols.push(self.solve_vec(&e));
        }
        CMatrix::from_fn(n, n, |i, j| cols[j][i])
    }
}

/// Householder QR of a tall matrix, kept in factored form for repeated
/// least-squares solves.
#[derive(Clone, Debug)]
pub struct Qr<T> {
    /// `R` in the upper triangle.
    qr: CMatrix<T>,
    /// Unit-norm reflector of every column.
    v: Vec<Vec<Complex<T>>>,
}

impl<T: Scalar> Qr<T> {
    /// Fails when a diagonal entry of `R` falls below `rel_tol` times the
    /// largest one (rank deficiency).
    pub fn factor(a: &CMatrix<T>, rel_tol: T) -> Result<Self> {
        let (m, n) = (a.rows, a.cols);
        if m < n {
            return Err(DseError::shape("qr", format!("at least {n} rows"), m));
        }
        let mut r = a.clone();
        let mut vs = Vec::with_capacity(n);
        for k in 0..n {
            let norm = (k..m).map(|i| r[(i, k)].norm_sqr()).sum::<T>().sqrt();
            let mut v: Vec<Complex<T>> = (k..m).map(|i| r[(i, k)]).collect();
            if norm > T::zero() {
                let x0 = v[0];
                let phase = if x0.norm() > T::zero() { x0.unscale(x0.norm()) } else { Complex::one() };
                let alpha = -phase.scale(norm);
                v[0] = v[0] - alpha;
                let vn = v.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt();
                if vn > T::zero() {
                    for z in v.iter_mut() {
                        *z = z.unscale(vn);
                    }
                    for j in k..n {
                        let dot = (k..m).fold(Complex::zero(), |acc, i| acc + v[i - k].conj() * r[(i, j)]);
                        let two_dot = dot.scale(T::lit(2.0));
                        for i in k..m {
                            let upd = v[i - k] * two_dot;
                            r[(i, j)] = r[(i, j)] - upd;
                        }
                    }
                } else {
                    v.iter_mut().for_each(|z| *z = Complex::zero());
                }
            } else {
                v.iter_mut().for_each(|z| *z = Complex::zero());
            }
            vs.push(v);
        }
        let dmax = (0..n).fold(T::zero(), |acc, i| acc.max(r[(i, i)].norm()));
        for i in 0..n {
            if !(r[(i, i)].norm() > rel_tol * dmax) || dmax == T::zero() {
                return Err(DseError::Observability(format!("least-squares matrix is rank deficient at column {i}")));
            }
        }
        Ok(Self { qr: r, v: vs })
    }

    /// Minimizer of `‖A·x − b‖₂`.
    pub fn solve_vec(&self, b: &[Complex<T>]) -> Vec<Complex<T>> {
        let (m, n) = (self.qr.rows, self.qr.cols);
        let mut y = b.to_vec();
        for (k, v) in self.v.iter().enumerate() {
            let dot = (k..m).fold(Complex::zero(), |acc, i| acc + v[i - k].conj() * y[i]);
            let two_dot = dot.scale(T::lit(2.0));
            for i in k..m {
                y[i] = y[i] - v[i - k] * two_dot;
            }
        }
        let mut x = vec![Complex::zero(); n];
        for i in (0..n).rev() {
            let mut s = y[i];
            for j in i + 1..n {
                s = s - self.qr[(i, j)] * x[j];
            }
            x[i] = s / self.qr[(i, i)];
        }
        x
    }
}

/// Numerical rank by Gaussian elimination with complete pivoting; pivots
/// below `rel_tol · max|a_ij|` count as zero.
pub fn rank<T: Scalar>(a: &CMatrix<T>, rel_tol: T) -> usize {
    let mut m = a.clone();
    let (rows, cols) = (m.rows, m.cols);
    let tol = rel_tol * m.max_abs();
    let mut r = 0;
    let mut col_used = vec![false; cols];
    let mut row_used = vec![false; rows];
    loop {
        let mut best = T::zero();
        let mut at = None;
        for i in 0..rows {
            if row_used[i] {
                continue;
            }
            for j in 0..cols {
                if col_used[j] {
                    continue;
                }
                let v = m[(i, j)].norm();
                if v > best {
                    best = v;
                    at = Some((i, j));
                }
            }
        }
        let Some((pi, pj)) = at else { break };
        if best <= tol {
            break;
        }
        row_used[pi] = true;
        col_used[pj] = true;
        r += 1;
        let pivot = m[(pi, pj)];
        for i in 0..rows {
            if row_used[i] {
                continue;
            }
            let f = m[(i, pj)] / pivot;
            if f.is_zero() {
                continue;
            }
            for j in 0..cols {
                let v = m[(pi, j)];
                m[(i, j)] = m[(i, j)] - f * v;
            }
        }
    }
    r
}

/// Eigen-decomposition of a Hermitian matrix, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct HermitianEigen<T> {
    pub values: Vec<T>,
    /// Columns are the orthonormal eigenvectors.
    pub vectors: CMatrix<T>,
}

/// Cyclic complex Jacobi iteration. Intended for the moderate sizes of the
/// covariance matrices in this crate (a few hundred at most).
pub fn hermitian_eigen<T: Scalar>(a: &CMatrix<T>) -> Result<HermitianEigen<T>> {
    if !a.is_square() {
        return Err(DseError::shape("hermitian_eigen", "square matrix", format!("{}x{}", a.rows, a.cols)));
    }
    let n = a.rows;
    let mut m = a.hermitian_part();
    let mut v = CMatrix::<T>::identity(n);
    let eps = T::epsilon();
    let norm = m.frobenius_norm();
    if norm.is_zero() {
        return Ok(HermitianEigen {
            values: vec![T::zero(); n],
            vectors: v,
        });
    }
    for _sweep in 0..100 {
        let mut off = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    off = off + m[(i, j)].norm_sqr();
                }
            }
        }
        if off.sqrt() <= eps * norm {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let g = m[(p, q)];
                let gabs = g.norm();
                if gabs <= T::min_positive_value() {
                    continue;
                }
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                let phase = g.unscale(gabs);
                let two = T::lit(2.0);
                let tau = (aqq - app) / (two * gabs);
                let t = if tau >= T::zero() {
                    T::one() / (tau + (T::one() + tau * tau).sqrt())
                } else {
                    -T::one() / (-tau + (T::one() + tau * tau).sqrt())
                };
                let cs = T::one() / (T::one() + t * t).sqrt();
                let sn = t * cs;
                let cz = Complex::new(cs, T::zero());
                let sz = Complex::new(sn, T::zero());
                // U = diag(1, conj(phase)) · [[c, s], [-s, c]]
                let u_pp = cz;
                let u_pq = sz;
                let u_qp = -sz * phase.conj();
                let u_qq = cz * phase.conj();
                for r in 0..n {
                    let arp = m[(r, p)];
                    let arq = m[(r, q)];
                    m[(r, p)] = arp * u_pp + arq * u_qp;
                    m[(r, q)] = arp * u_pq + arq * u_qq;
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)];
                    v[(r, p)] = vrp * u_pp + vrq * u_qp;
                    v[(r, q)] = vrp * u_pq + vrq * u_qq;
                }
                for r in 0..n {
                    let apr = m[(p, r)];
                    let aqr = m[(q, r)];
                    m[(p, r)] = u_pp.conj() * apr + u_qp.conj() * aqr;
                    m[(q, r)] = u_pq.conj() * apr + u_qq.conj() * aqr;
                }
                m[(p, q)] = Complex::zero();
                m[(q, p)] = Complex::zero();
                m[(p, p)] = Complex::new(m[(p, p)].re, T::zero());
                m[(q, q)] = Complex::new(m[(q, q)].re, T::zero());
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].re.partial_cmp(&m[(j, j)].re).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| m[(i, i)].re).collect();
    let vectors = v.select_columns(&order);
    Ok(HermitianEigen { values, vectors })
}

/// Smallest eigenvalue of the Hermitian part of `a`.
pub fn min_hermitian_eigenvalue<T: Scalar>(a: &CMatrix<T>) -> Result<T> {
    Ok(hermitian_eigen(a)?.values.first().copied().unwrap_or_else(T::zero))
}

/// Replaces negative eigenvalues of the Hermitian part of `a` with zero.
pub fn floor_eigenvalues<T: Scalar>(a: &CMatrix<T>) -> Result<CMatrix<T>> {
    let eig = hermitian_eigen(a)?;
    let n = a.rows;
    let v = &eig.vectors;
    let out = CMatrix::from_fn(n, n, |i, j| {
        let mut s = Complex::zero();
        for (k, lam) in eig.values.iter().enumerate() {
            if *lam > T::zero() {
                s = s + v[(i, k)] * v[(j, k)].conj() * *lam;
            }
        }
        s
    });
    Ok(out.hermitian_part())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::c;

    fn sample() -> CMatrix<f64> {
        CMatrix::from_rows(&[
            vec![c(4.0, 0.0), c(1.0, 1.0), c(0.0, -0.5)],
            vec![c(1.0, -1.0), c(3.0, 0.0), c(0.2, 0.0)],
            vec![c(0.0, 0.5), c(0.2, 0.0), c(2.0, 0.0)],
        ])
        .unwrap()
    }

    #[test]
    fn lu_solves_and_inverts() {
        let a = sample();
        let lu = Lu::factor(&a).unwrap();
        let inv = lu.inverse();
        let eye = a.matmul(&inv);
        let err = (&eye - &CMatrix::identity(3)).max_abs();
        assert!(err < 1e-14, "{err}");
        let b = vec![c(1.0, 0.0), c(0.0, 2.0), c(-1.0, 1.0)];
        let x = lu.solve_vec(&b);
        let r = a.mul_vec(&x);
        for (ri, bi) in r.iter().zip(&b) {
            assert!((ri - bi).norm() < 1e-14);
        }
    }

    #[test]
    fn singular_lu_is_rejected() {
        let a = CMatrix::<f64>::zeros(2, 2);
        assert!(Lu::factor(&a).is_err());
    }

    #[test]
    fn cholesky_matches_lu() {
        let a = sample();
        let ch = Cholesky::factor(&a, 1e-14).unwrap();
        let b = vec![c(0.3, 0.1), c(-1.0, 0.0), c(0.0, 0.7)];
        let x1 = ch.solve_vec(&b);
        let x2 = Lu::factor(&a).unwrap().solve_vec(&b);
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - q).norm() < 1e-13);
        }
        let not_pd = CMatrix::from_diagonal(&[c(1.0, 0.0), c(-1.0, 0.0)]);
        assert!(Cholesky::factor(&not_pd, 1e-14).is_err());
    }

    #[test]
    fn jacobi_reconstructs_matrix() {
        let a = sample();
        let e = hermitian_eigen(&a).unwrap();
        let lam = CMatrix::from_diagonal(&e.values.iter().map(|v| c(*v, 0.0)).collect::<Vec<_>>());
        let back = e.vectors.matmul(&lam).matmul(&e.vectors.adjoint());
        assert!((&back - &a).max_abs() < 1e-12);
        assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        let trace: f64 = e.values.iter().sum();
        assert!((trace - 9.0).abs() < 1e-12);
    }

    #[test]
    fn flooring_removes_negative_eigenvalues() {
        let a = CMatrix::<f64>::from_rows(&[vec![c(1.0, 0.0), c(0.0, 2.0)], vec![c(0.0, -2.0), c(1.0, 0.0)]]).unwrap();
        assert!(min_hermitian_eigenvalue(&a).unwrap() < -0.9);
        let f = floor_eigenvalues(&a).unwrap();
        assert!(min_hermitian_eigenvalue(&f).unwrap() > -1e-12);
        // the positive eigenvalue 3 survives
        assert!((f.trace().re - 3.0).abs() < 1e-12);
    }

    #[test]
    fn rank_detects_dependent_rows() {
        let a = CMatrix::from_rows(&[
            vec![c(1.0, 0.0), c(2.0, 1.0)],
            vec![c(2.0, 0.0), c(4.0, 2.0)],
            vec![c(0.0, 1.0), c(-1.0, 2.0)],
        ])
        .unwrap();
        // third row is i times the first
        assert_eq!(rank(&a, 1e-12), 1);
        assert_eq!(rank(&CMatrix::<f64>::identity(4), 1e-12), 4);
    }

    #[test]
    fn matmul_block_roundtrip() {
        let a = sample();
        let big = CMatrix::from_blocks(&a, &a.conj(), &a.transpose(), &a.adjoint());
        assert_eq!(big.block(3, 3, 3, 3), a.adjoint());
        assert_eq!(big.block(0, 3, 3, 3), a.conj());
        let sq = big.matmul(&CMatrix::identity(6));
        assert_eq!(sq, big);
    }
}
