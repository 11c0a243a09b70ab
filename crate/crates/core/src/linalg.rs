//! Small dense linear algebra: row-major matrices, Cholesky factorization,
//! triangular solves, Householder QR with an implicit full `Q`, and a one-sided
//! Jacobi SVD. Sizes here are tiny (latent dimension ≤ ~16) except for the
//! tall Jacobians, which only ever touch `Q` through reflector products.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
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

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::contract(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equally long rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::contract("ragged rows"));
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data: rows.concat(),
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn set_column(&mut self, j: usize, values: &[f64]) {
        for (i, v) in values.iter().enumerate() {
            self[(i, j)] = *v;
        }
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matmul inner dimensions");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let a = self[(i, k)];
                if a == 0.0 {
                    continue;
                }
                let orow = other.row(k);
                let dst = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (d, b) in dst.iter_mut().zip(orow) {
                    *d += a * b;
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    /// `selfᵀ · v`.
    pub fn tr_matvec(&self, v: &[f64]) -> Vec<f64> {
        assert_eq!(self.rows, v.len());
        let mut out = vec![0.0; self.cols];
        for (i, vi) in v.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += a * vi;
            }
        }
        out
    }

    pub fn frobenius_norm(&self) -> f64 {
        norm(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

impl std::ops::Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl std::ops::IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Lower-triangular `L` with `L Lᵀ = a`. Fails unless `a` is symmetric
/// positive definite to working precision.
pub fn cholesky(a: &Matrix) -> Result<Matrix> {
    if a.rows != a.cols {
        return Err(Error::contract("cholesky needs a square matrix"));
    }
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > 0.0) || !d.is_finite() {
            return Err(Error::numeric(format!(
                "matrix is not positive definite (pivot {j} = {d:e})"
            )));
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in j + 1..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Ok(l)
}

/// Solves `L x = b` for lower-triangular `L`.
pub fn solve_lower(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = b.to_vec();
    for i in 0..n {
        let mut s = x[i];
        for k in 0..i {
            s -= l[(i, k)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Solves `Lᵀ x = b` for lower-triangular `L`.
pub fn solve_lower_transposed(l: &Matrix, b: &[f64]) -> Vec<f64> {
    let n = l.rows;
    let mut x = b.to_vec();
    for i in (0..n).rev() {
        let mut s = x[i];
        for k in i + 1..n {
            s -= l[(k, i)] * x[k];
        }
        x[i] = s / l[(i, i)];
    }
    x
}

/// Householder QR of an `m × n` matrix. `Q` (m × m) is kept implicitly as a
/// product of `min(m, n)` reflectors so that applying it costs `O(m·n)`.
#[derive(Debug, Clone)]
pub struct HouseholderQr {
    m: usize,
    /// Reflector `k` acts on coordinates `k..m`; stored without the leading zeros.
    reflectors: Vec<Vec<f64>>,
    betas: Vec<f64>,
    /// Upper-trapezoidal `min(m, n) × n` factor.
    r: Matrix,
}

impl HouseholderQr {
    pub fn new(a: &Matrix) -> Self {
        let (m, n) = (a.rows, a.cols);
        let p = m.min(n);
        let mut work = a.clone();
        let mut reflectors = Vec::with_capacity(p);
        let mut betas = Vec::with_capacity(p);
        for k in 0..p {
            let mut v: Vec<f64> = (k..m).map(|i| work[(i, k)]).collect();
            let xnorm = norm(&v);
            if xnorm == 0.0 {
                reflectors.push(v);
                betas.push(0.0);
                continue;
            }
            let alpha = if v[0] >= 0.0 { -xnorm } else { xnorm };
            v[0] -= alpha;
            let vtv = dot(&v, &v);
            let beta = if vtv > 0.0 { 2.0 / vtv } else { 0.0 };
            for j in k..n {
                let s: f64 = (k..m).map(|i| v[i - k] * work[(i, j)]).sum::<f64>() * beta;
                for i in k..m {
                    work[(i, j)] -= s * v[i - k];
                }
            }
            // Exact zeros below the diagonal.
            work[(k, k)] = alpha;
            for i in k + 1..m {
                work[(i, k)] = 0.0;
            }
            reflectors.push(v);
            betas.push(beta);
        }
        let mut r = Matrix::zeros(p, n);
        for i in 0..p {
            for j in i..n {
                r[(i, j)] = work[(i, j)];
            }
        }
        Self {
            m,
            reflectors,
            betas,
            r,
        }
    }

    pub fn r(&self) -> &Matrix {
        &self.r
    }

    pub fn rows(&self) -> usize {
        self.m
    }

    /// `y ← Q y`.
    pub fn apply_q(&self, y: &mut [f64]) {
        assert_eq!(y.len(), self.m);
        for k in (0..self.reflectors.len()).rev() {
            self.reflect(k, y);
        }
    }

    /// `y ← Qᵀ y`.
    pub fn apply_qt(&self, y: &mut [f64]) {
        assert_eq!(y.len(), self.m);
        for k in 0..self.reflectors.len() {
            self.reflect(k, y);
        }
    }

    fn reflect(&self, k: usize, y: &mut [f64]) {
        let beta = self.betas[k];
        if beta == 0.0 {
            return;
        }
        let v = &self.reflectors[k];
        let tail = &mut y[k..];
        let s = dot(v, tail) * beta;
        for (t, vi) in tail.iter_mut().zip(v) {
            *t -= s * vi;
        }
    }
}

/// Singular values (descending) and the full orthogonal matrix of left
/// singular vectors of a `p × n` matrix with `p ≤ n`, by one-sided Jacobi
/// rotations applied to the rows.
pub fn jacobi_left_svd(a: &Matrix) -> (Vec<f64>, Matrix) {
    let (p, n) = (a.rows, a.cols);
    assert!(p <= n, "jacobi_left_svd expects a wide or square matrix");
    // Rows of `a` are the columns of B = aᵀ; rotating them orthogonalizes B.
    let mut rows: Vec<Vec<f64>> = (0..p).map(|i| a.row(i).to_vec()).collect();
    let mut v = Matrix::identity(p);
    let tol = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..p {
            for j in i + 1..p {
                let alpha = dot(&rows[i], &rows[i]);
                let beta = dot(&rows[j], &rows[j]);
                let gamma = dot(&rows[i], &rows[j]);
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = rows.split_at_mut(j);
                for (x, y) in lo[i].iter_mut().zip(hi[0].iter_mut()) {
                    let (xi, yj) = (*x, *y);
                    *x = c * xi - s * yj;
                    *y = s * xi + c * yj;
                }
                for r in 0..p {
                    let (vi, vj) = (v[(r, i)], v[(r, j)]);
                    v[(r, i)] = c * vi - s * vj;
                    v[(r, j)] = s * vi + c * vj;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let sigma: Vec<f64> = rows.iter().map(|r| norm(r)).collect();
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&x, &y| sigma[y].total_cmp(&sigma[x]));
    let mut u = Matrix::zeros(p, p);
    for (dst, &src) in order.iter().enumerate() {
        for r in 0..p {
            u[(r, dst)] = v[(r, src)];
        }
    }
    (order.iter().map(|&k| sigma[k]).collect(), u)
}

/// Full SVD of a tall matrix, `A = U Σ Wᵀ`, keeping `U` (m × m) implicit as
/// `Q · diag(U_r, I)` where `A = Q R` and `R = U_r Σ W_rᵀ`.
#[derive(Debug, Clone)]
pub struct LeftSvd {
    qr: HouseholderQr,
    u_small: Matrix,
    singular_values: Vec<f64>,
}

impl LeftSvd {
    pub fn new(a: &Matrix) -> Self {
        let qr = HouseholderQr::new(a);
        let (singular_values, u_small) = jacobi_left_svd(qr.r());
        Self {
            qr,
            u_small,
            singular_values,
        }
    }

    /// Singular values in descending order; there are `min(m, n)` of them.
    pub fn singular_values(&self) -> &[f64] {
        &self.singular_values
    }

    pub fn rows(&self) -> usize {
        self.qr.rows()
    }

    /// `U · c` where `c` has `m` entries (coefficients on all left singular vectors).
    pub fn apply_u(&self, c: &[f64]) -> Vec<f64> {
        let p = self.u_small.rows();
        let mut y = c.to_vec();
        let head = self.u_small.matvec(&c[..p]);
        y[..p].copy_from_slice(&head);
        self.qr.apply_q(&mut y);
        y
    }

    /// `Uᵀ · y`.
    pub fn apply_ut(&self, y: &[f64]) -> Vec<f64> {
        let p = self.u_small.rows();
        let mut c = y.to_vec();
        self.qr.apply_qt(&mut c);
        let head = self.u_small.tr_matvec(&c[..p]);
        c[..p].copy_from_slice(&head);
        c
    }

    /// Left singular vector `j` (0-based, `j < m`).
    pub fn left_vector(&self, j: usize) -> Vec<f64> {
        let mut e = vec![0.0; self.rows()];
        e[j] = 1.0;
        self.apply_u(&e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn approx(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn cholesky_reconstructs() {
        let a = Matrix::from_rows(&[
            vec![4.0, 2.0, 0.4],
            vec![2.0, 3.0, 0.5],
            vec![0.4, 0.5, 2.0],
        ])
        .unwrap();
        let l = cholesky(&a).unwrap();
        let back = l.matmul(&l.transpose());
        for i in 0..3 {
            for j in 0..3 {
                assert!(approx(back[(i, j)], a[(i, j)], 1e-12));
            }
            for j in i + 1..3 {
                assert_eq!(l[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]).unwrap();
        assert!(matches!(cholesky(&a), Err(Error::Numeric(_))));
    }

    #[test]
    fn triangular_solves_invert() {
        let l = Matrix::from_rows(&[vec![2.0, 0.0], vec![1.0, 3.0]]).unwrap();
        let x = solve_lower(&l, &[4.0, 11.0]);
        assert!(approx(x[0], 2.0, 1e-15) && approx(x[1], 3.0, 1e-15));
        // Lᵀ = [[2,1],[0,3]]; Lᵀ [1,2] = [4,6]
        let y = solve_lower_transposed(&l, &[4.0, 6.0]);
        assert!(approx(y[0], 1.0, 1e-15) && approx(y[1], 2.0, 1e-15));
    }

    #[test]
    fn qr_reflectors_are_orthogonal() {
        let a = Matrix::from_rows(&[
            vec![1.0, 2.0],
            vec![3.0, -1.0],
            vec![0.5, 0.25],
            vec![-2.0, 1.0],
        ])
        .unwrap();
        let qr = HouseholderQr::new(&a);
        // Q R reproduces A column by column.
        for j in 0..2 {
            let mut col = vec![0.0; 4];
            for i in 0..2 {
                col[i] = qr.r()[(i, j)];
            }
            qr.apply_q(&mut col);
            for i in 0..4 {
                assert!(approx(col[i], a[(i, j)], 1e-12));
            }
        }
        let mut y = vec![0.3, -0.7, 1.1, 2.0];
        let orig = y.clone();
        qr.apply_q(&mut y);
        assert!(approx(norm(&y), norm(&orig), 1e-12));
        qr.apply_qt(&mut y);
        for (a, b) in y.iter().zip(&orig) {
            assert!(approx(*a, *b, 1e-12));
        }
    }

    #[test]
    fn jacobi_on_diagonal_sorts() {
        let a = Matrix::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 3.0, 0.0]]).unwrap();
        let (s, u) = jacobi_left_svd(&a);
        assert_eq!(s, vec![3.0, 1.0]);
        assert!(approx(u[(1, 0)].abs(), 1.0, 1e-15));
        assert!(approx(u[(0, 1)].abs(), 1.0, 1e-15));
    }
}
