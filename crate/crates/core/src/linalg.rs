//! Small dense linear algebra used by the solvers.
//!
//! Everything here is sized for the problems at hand: d x d covariance
//! matrices, tridiagonal systems of a few hundred unknowns and tall
//! least-squares designs with at most ten columns.

use std::ops::{Index, IndexMut};

use thiserror::Error;

use crate::scalar::Real;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("matrix is singular or nearly so (condition estimate {cond:e})")]
    Singular { cond: f64 },
    #[error("zero pivot in tridiagonal solve at row {row}")]
    ZeroPivot { row: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite entry encountered")]
    NotFinite,
}

/// Dense row-major matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self, LinalgError> {
        if data.len() != rows * cols {
            return Err(LinalgError::Shape(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self, LinalgError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(LinalgError::Shape("ragged rows".into()));
        }
        Ok(Self { rows: r, cols: c, data: rows.concat() })
    }

    pub fn diagonal(d: &[T]) -> Self {
        let mut m = Self::zeros(d.len(), d.len());
        for (i, &v) in d.iter().enumerate() {
            m[(i, i)] = v;
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Self) -> Result<Self, LinalgError> {
        if self.cols != other.rows {
            return Err(LinalgError::Shape(format!(
                "{}x{} times {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + a * other[(k, j)];
                }
            }
        }
        Ok(out)
    }

    pub fn matvec(&self, v: &[T]) -> Result<Vec<T>, LinalgError> {
        if v.len() != self.cols {
            return Err(LinalgError::Shape(format!(
                "{}x{} times vector of length {}",
                self.rows,
                self.cols,
                v.len()
            )));
        }
        Ok((0..self.rows).map(|i| dot(self.row(i), v)).collect())
    }

    /// Quadratic form `vᵀ A v`.
    pub fn quad_form(&self, v: &[T]) -> Result<T, LinalgError> {
        Ok(dot(v, &self.matvec(v)?))
    }

    pub fn add(&self, other: &Self) -> Result<Self, LinalgError> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self, LinalgError> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn scale(&self, s: T) -> Self {
        Self { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&a| a * s).collect() }
    }

    fn zip_with(&self, other: &Self, f: impl Fn(T, T) -> T) -> Result<Self, LinalgError> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(LinalgError::Shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
        Ok(Self { rows: self.rows, cols: self.cols, data })
    }

    /// Entrywise Euclidean norm.
    pub fn frobenius_norm(&self) -> T {
        self.data.iter().map(|&a| a * a).sum::<T>().sqrt()
    }

    pub fn is_symmetric(&self, tol: T) -> bool {
        self.is_square()
            && (0..self.rows).all(|i| (0..i).all(|j| (self[(i, j)] - self[(j, i)]).abs() <= tol))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    /// Maximum absolute column sum.
    pub fn norm1(&self) -> T {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self[(i, j)].abs()).sum::<T>())
            .fold(T::zero(), T::max)
    }
}

impl<T> Index<(usize, usize)> for Matrix<T> {
    type Output = T;

    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> IndexMut<(usize, usize)> for Matrix<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

pub fn norm2<T: Real>(a: &[T]) -> T {
    dot(a, a).sqrt()
}

/// LU factorization with partial pivoting of a square matrix.
#[derive(Debug, Clone)]
pub struct Lu<T> {
    lu: Matrix<T>,
    perm: Vec<usize>,
}

impl<T: Real> Lu<T> {
    pub fn new(a: &Matrix<T>) -> Result<Self, LinalgError> {
        if !a.is_square() {
            return Err(LinalgError::Shape(format!("LU of {}x{} matrix", a.rows, a.cols)));
        }
        if !a.is_finite() {
            return Err(LinalgError::NotFinite);
        }
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a.norm1().max(T::min_positive_value());
        for k in 0..n {
            let p = (k..n)
                .max_by(|&i, &j| lu[(i, k)].abs().partial_cmp(&lu[(j, k)].abs()).unwrap())
                .unwrap();
            if lu[(p, k)].abs() <= T::epsilon() * scale {
                return Err(LinalgError::Singular { cond: f64::INFINITY });
            }
            if p != k {
                for j in 0..n {
                    let tmp = lu[(k, j)];
                    lu[(k, j)] = lu[(p, j)];
                    lu[(p, j)] = tmp;
                }
                perm.swap(k, p);
            }
            let piv = lu[(k, k)];
            for i in k + 1..n {
                let f = lu[(i, k)] / piv;
                lu[(i, k)] = f;
                for j in k + 1..n {
                    lu[(i, j)] = lu[(i, j)] - f * lu[(k, j)];
                }
            }
        }
        Ok(Self { lu, perm })
    }

    pub fn solve(&self, b: &[T]) -> Result<Vec<T>, LinalgError> {
        let n = self.lu.rows;
        if b.len() != n {
            return Err(LinalgError::Shape(format!("rhs of length {} for order {n}", b.len())));
        }
        let mut x: Vec<T> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] = x[i] - self.lu[(i, j)] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] = x[i] - self.lu[(i, j)] * x[j];
            }
            x[i] = x[i] / self.lu[(i, i)];
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix<T> {
        let n = self.lu.rows;
        let mut inv = Matrix::zeros(n, n);
        for j in 0..n {
            let mut e = vec![T::zero(); n];
            e[j] = T::one();
            let col = self.solve(&e).expect("order checked at construction");
            for i in 0..n {
                inv[(i, j)] = col[i];
            }
        }
        inv
    }
}

/// 1-norm condition number, computed through an explicit inverse.
pub fn condition_number<T: Real>(a: &Matrix<T>) -> f64 {
    match Lu::new(a) {
        Ok(lu) => (a.norm1() * lu.inverse().norm1()).f64(),
        Err(_) => f64::INFINITY,
    }
}

/// Solves `A x = b`, rejecting matrices whose condition estimate exceeds `max_cond`.
pub fn solve_checked<T: Real>(a: &Matrix<T>, b: &[T], max_cond: f64) -> Result<Vec<T>, LinalgError> {
    let lu = Lu::new(a)?;
    let cond = (a.norm1() * lu.inverse().norm1()).f64();
    if !(cond <= max_cond) {
        return Err(LinalgError::Singular { cond });
    }
    lu.solve(b)
}

/// Lower Cholesky factor, or `None` when `a` is not positive definite.
pub fn cholesky<T: Real>(a: &Matrix<T>) -> Option<Matrix<T>> {
    if !a.is_square() {
        return None;
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d = d - l[(j, k)] * l[(j, k)];
        }
        if !(d > T::zero()) {
            return None;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Some(l)
}

/// Lower factor `L` with `L Lᵀ = a` for symmetric positive semidefinite `a`.
///
/// Zero pivots (rank deficiency) produce zero columns instead of failing.
pub fn psd_factor<T: Real>(a: &Matrix<T>) -> Option<Matrix<T>> {
    if !a.is_square() {
        return None;
    }
    let n = a.rows;
    let tol = T::lit(1e3) * T::epsilon() * a.norm1().max(T::min_positive_value());
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d = d - l[(j, k)] * l[(j, k)];
        }
        if d < -tol {
            return None;
        }
        if d <= tol {
            continue;
        }
        let dj = d.sqrt();
        l[(j, j)] = dj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / dj;
        }
    }
    Some(l)
}

/// Eigen-decomposition of a symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// columns.
pub fn symmetric_eigen<T: Real>(a: &Matrix<T>) -> Result<(Vec<T>, Matrix<T>), LinalgError> {
    if !a.is_square() {
        return Err(LinalgError::Shape("eigen-decomposition of non-square matrix".into()));
    }
    if !a.is_finite() {
        return Err(LinalgError::NotFinite);
    }
    let n = a.rows;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    for _sweep in 0..100 {
        let off: T = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)] * m[(i, j)])
            .sum();
        if off <= T::min_positive_value() || off.sqrt() <= T::epsilon() * m.frobenius_norm() * T::lit(1e-3) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let theta = (m[(q, q)] - m[(p, p)]) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
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
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].partial_cmp(&m[(j, j)]).unwrap());
    let values = order.iter().map(|&i| m[(i, i)]).collect();
    let mut vectors = Matrix::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, c)] = v[(k, i)];
        }
    }
    Ok((values, vectors))
}

/// Thomas algorithm for a tridiagonal system.
///
/// `sub[i]` multiplies `x[i-1]` and `sup[i]` multiplies `x[i+1]` in row `i`;
/// `sub[0]` and `sup[n-1]` are ignored.
pub fn solve_tridiagonal<T: Real>(sub: &[T], diag: &[T], sup: &[T], rhs: &[T]) -> Result<Vec<T>, LinalgError> {
    let n = diag.len();
    if sub.len() != n || sup.len() != n || rhs.len() != n {
        return Err(LinalgError::Shape("tridiagonal bands of unequal length".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut c = vec![T::zero(); n];
    let mut d = vec![T::zero(); n];
    let mut piv = diag[0];
    if piv == T::zero() || !piv.is_finite() {
        return Err(LinalgError::ZeroPivot { row: 0 });
    }
    c[0] = sup[0] / piv;
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = diag[i] - sub[i] * c[i - 1];
        if piv == T::zero() || !piv.is_finite() {
            return Err(LinalgError::ZeroPivot { row: i });
        }
        c[i] = if i + 1 < n { sup[i] / piv } else { T::zero() };
        d[i] = (rhs[i] - sub[i] * d[i - 1]) / piv;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        x[i] = x[i] - c[i] * x[i + 1];
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NotFinite);
    }
    Ok(x)
}

/// Least-squares solution of a tall system.
#[derive(Debug, Clone)]
pub struct LeastSquares<T> {
    pub beta: Vec<T>,
    pub residuals: Vec<T>,
    /// 2-norm condition number of the (column-scaled) design.
    pub cond: f64,
}

/// Householder QR least squares for `design` (row-major, `rows x k`).
///
/// Columns are scaled to unit norm before factorization; the reported
/// condition number refers to the scaled design.
pub fn least_squares<T: Real>(design: &Matrix<T>, y: &[T]) -> Result<LeastSquares<T>, LinalgError> {
    let (m, k) = (design.rows, design.cols);
    if y.len() != m {
        return Err(LinalgError::Shape(format!("{m} design rows, {} targets", y.len())));
    }
    if m < k {
        return Err(LinalgError::Shape(format!("underdetermined: {m} rows, {k} columns")));
    }
    // column-major working copy, scaled
    let mut scale = vec![T::zero(); k];
    let mut a: Vec<Vec<T>> = (0..k).map(|_| Vec::with_capacity(m)).collect();
    for i in 0..m {
        let row = design.row(i);
        for j in 0..k {
            a[j].push(row[j]);
        }
    }
    for j in 0..k {
        let s = norm2(&a[j]);
        if !(s > T::zero()) || !s.is_finite() {
            return Err(LinalgError::Singular { cond: f64::INFINITY });
        }
        scale[j] = s;
        for v in a[j].iter_mut() {
            *v = *v / s;
        }
    }
    let mut qty = y.to_vec();
    let mut rdiag = vec![T::zero(); k];
    for j in 0..k {
        let norm = norm2(&a[j][j..]);
        let alpha = if a[j][j] > T::zero() { -norm } else { norm };
        // Householder vector stored in a[j][j..]
        a[j][j] = a[j][j] - alpha;
        let vnorm2 = dot(&a[j][j..], &a[j][j..]);
        rdiag[j] = alpha;
        if vnorm2 == T::zero() {
            continue;
        }
        let (head, tail) = a.split_at_mut(j + 1);
        let v = &head[j][j..];
        for col in tail.iter_mut() {
            let f = T::lit(2.0) * dot(v, &col[j..]) / vnorm2;
            for (c, &vi) in col[j..].iter_mut().zip(v) {
                *c = *c - f * vi;
            }
        }
        let f = T::lit(2.0) * dot(v, &qty[j..]) / vnorm2;
        for (c, &vi) in qty[j..].iter_mut().zip(v) {
            *c = *c - f * vi;
        }
    }
    // R is upper triangular: R[i][j] = a[j][i] for i < j, rdiag on the diagonal.
    let mut r = Matrix::zeros(k, k);
    for j in 0..k {
        r[(j, j)] = rdiag[j];
        for i in 0..j {
            r[(i, j)] = a[j][i];
        }
    }
    let rtr = r.transpose().matmul(&r)?;
    let (ev, _) = symmetric_eigen(&rtr)?;
    let cond = if ev[0] > T::zero() { (ev[k - 1] / ev[0]).sqrt().f64() } else { f64::INFINITY };
    let mut z = vec![T::zero(); k];
    for i in (0..k).rev() {
        let mut s = qty[i];
        for j in i + 1..k {
            s = s - r[(i, j)] * z[j];
        }
        if r[(i, i)] == T::zero() {
            return Err(LinalgError::Singular { cond });
        }
        z[i] = s / r[(i, i)];
    }
    let beta: Vec<T> = z.iter().zip(&scale).map(|(&b, &s)| b / s).collect();
    let residuals = (0..m).map(|i| y[i] - dot(design.row(i), &beta)).collect();
    Ok(LeastSquares { beta, residuals, cond })
}
