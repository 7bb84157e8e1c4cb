//! Small dense column-major matrices with the factorizations needed by
//! TT-rounding (Householder QR, one-sided Jacobi SVD).

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    /// Column-major storage, entry (i, j) at `i + rows * j`.
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i + n * i] = 1.0;
        }
        m
    }

    pub fn from_col_major(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension { expected: rows * cols, found: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for j in 0..cols {
            for i in 0..rows {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i + self.rows * j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i + self.rows * j] = v;
    }

    #[inline]
    pub fn col(&self, j: usize) -> &[f64] {
        &self.data[self.rows * j..self.rows * (j + 1)]
    }

    #[inline]
    pub fn col_mut(&mut self, j: usize) -> &mut [f64] {
        &mut self.data[self.rows * j..self.rows * (j + 1)]
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        (0..self.cols).map(|j| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Mat {
        Mat::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// Reinterprets the storage with a new shape (column-major reshape).
    pub fn reshape(mut self, rows: usize, cols: usize) -> Result<Mat> {
        if rows * cols != self.data.len() {
            return Err(Error::Dimension { expected: self.data.len(), found: rows * cols });
        }
        self.rows = rows;
        self.cols = cols;
        Ok(self)
    }

    pub fn matmul(&self, other: &Mat) -> Mat {
        let mut c = Mat::zeros(self.rows, other.cols);
        gemm(1.0, self, false, other, false, 0.0, &mut c);
        c
    }

    /// `self^T * other`
    pub fn t_matmul(&self, other: &Mat) -> Mat {
        let mut c = Mat::zeros(self.cols, other.cols);
        gemm(1.0, self, true, other, false, 0.0, &mut c);
        c
    }

    /// `self * other^T`
    pub fn matmul_t(&self, other: &Mat) -> Mat {
        let mut c = Mat::zeros(self.rows, other.rows);
        gemm(1.0, self, false, other, true, 0.0, &mut c);
        c
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.rows];
        self.matvec_acc(x, &mut y);
        y
    }

    /// y += A x
    pub fn matvec_acc(&self, x: &[f64], y: &mut [f64]) {
        debug_assert_eq!(x.len(), self.cols);
        debug_assert_eq!(y.len(), self.rows);
        for (j, &xj) in x.iter().enumerate() {
            if xj == 0.0 {
                continue;
            }
            axpy(xj, self.col(j), y);
        }
    }

    /// A^T x
    pub fn matvec_t(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        (0..self.cols).map(|j| dot(self.col(j), x)).collect()
    }

    pub fn frobenius(&self) -> f64 {
        norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(libm::fabs(*v)))
    }

    pub fn sub(&self, other: &Mat) -> Mat {
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Mat { rows: self.rows, cols: self.cols, data }
    }

    /// Columns `[0, k)`.
    pub fn leading_cols(&self, k: usize) -> Mat {
        Mat { rows: self.rows, cols: k, data: self.data[..self.rows * k].to_vec() }
    }

    /// Kronecker product `self ⊗ other` = [a_ij * other].
    pub fn kron(&self, other: &Mat) -> Mat {
        let (p, q) = (other.rows, other.cols);
        Mat::from_fn(self.rows * p, self.cols * q, |i, j| {
            self.get(i / p, j / q) * other.get(i % p, j % q)
        })
    }
}

/// C = alpha op(A) op(B) + beta C
pub fn gemm(alpha: f64, a: &Mat, ta: bool, b: &Mat, tb: bool, beta: f64, c: &mut Mat) {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "gemm inner dimension");
    assert_eq!((c.rows, c.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c.data.iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if ta { (a.rows as isize, 1) } else { (1, a.rows as isize) };
    let (rsb, csb) = if tb { (b.rows as isize, 1) } else { (1, b.rows as isize) };
    // SAFETY: shapes and strides checked above describe in-bounds accesses.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            c.data.as_mut_ptr(),
            1,
            m as isize,
        );
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn norm2(x: &[f64]) -> f64 {
    let scale = x.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
    if scale == 0.0 || !scale.is_finite() {
        return scale;
    }
    let mut s = 0.0;
    for v in x {
        let t = v / scale;
        s += t * t;
    }
    scale * libm::sqrt(s)
}

/// Thin Householder QR of an m x n matrix: Q is m x k, R is k x n, k = min(m, n).
pub fn qr_thin(a: &Mat) -> (Mat, Mat) {
    let (m, n) = (a.rows, a.cols);
    let k = m.min(n);
    if k == 0 {
        return (Mat::zeros(m, 0), Mat::zeros(0, n));
    }
    let mut r = a.clone();
    let mut vs: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut betas = Vec::with_capacity(k);
    for j in 0..k {
        let x = &r.col(j)[j..];
        let alpha = norm2(x);
        let mut v = x.to_vec();
        let beta;
        if alpha == 0.0 {
            beta = 0.0;
        } else {
            let s = if v[0] >= 0.0 { -alpha } else { alpha };
            v[0] -= s;
            let vn = dot(&v, &v);
            beta = if vn == 0.0 { 0.0 } else { 2.0 / vn };
        }
        if beta != 0.0 {
            for c in j..n {
                let col = &mut r.col_mut(c)[j..];
                let t = beta * dot(&v, col);
                axpy(-t, &v, col);
            }
        }
        vs.push(v);
        betas.push(beta);
    }
    let mut rk = Mat::zeros(k, n);
    for c in 0..n {
        for i in 0..=c.min(k - 1) {
            rk.set(i, c, r.get(i, c));
        }
    }
    let mut q = Mat::zeros(m, k);
    for i in 0..k {
        q.set(i, i, 1.0);
    }
    for j in (0..k).rev() {
        let v = &vs[j];
        let beta = betas[j];
        if beta == 0.0 {
            continue;
        }
        for c in 0..k {
            let col = &mut q.col_mut(c)[j..];
            let t = beta * dot(v, col);
            axpy(-t, v, col);
        }
    }
    (q, rk)
}

/// Thin SVD `A = U diag(s) V^T` with singular values sorted descending.
pub fn svd(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    if a.rows < a.cols {
        let (u, s, v) = svd(&a.transpose());
        return (v, s, u);
    }
    let (q, r) = qr_thin(a);
    let (ur, s, v) = jacobi_svd(&r);
    (q.matmul(&ur), s, v)
}

/// One-sided Jacobi SVD of a square matrix.
fn jacobi_svd(a: &Mat) -> (Mat, Vec<f64>, Mat) {
    let n = a.cols;
    let mut w = a.clone();
    let mut v = Mat::identity(n);
    for _sweep in 0..60 {
        let mut rotated = false;
        for i in 0..n {
            for j in i + 1..n {
                let (alpha, beta, gamma) = {
                    let ci = w.col(i);
                    let cj = w.col(j);
                    (dot(ci, ci), dot(cj, cj), dot(ci, cj))
                };
                if gamma == 0.0 || libm::fabs(gamma) <= 1e-15 * libm::sqrt(alpha * beta) {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (libm::fabs(zeta) + libm::sqrt(1.0 + zeta * zeta));
                let t = if zeta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(1.0 + t * t);
                let s = c * t;
                rotate(&mut w, i, j, c, s);
                rotate(&mut v, i, j, c, s);
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<(f64, usize)> = (0..n).map(|j| (norm2(w.col(j)), j)).collect();
    sv.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap_or(core::cmp::Ordering::Equal));
    let mut u = Mat::zeros(w.rows, n);
    let mut vs = Mat::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (k, &(sigma, j)) in sv.iter().enumerate() {
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..w.rows {
                u.set(i, k, w.get(i, j) / sigma);
            }
        }
        vs.col_mut(k).copy_from_slice(v.col(j));
    }
    (u, s, vs)
}

fn rotate(m: &mut Mat, i: usize, j: usize, c: f64, s: f64) {
    let rows = m.rows;
    for k in 0..rows {
        let a = m.data[k + rows * i];
        let b = m.data[k + rows * j];
        m.data[k + rows * i] = c * a - s * b;
        m.data[k + rows * j] = s * a + c * b;
    }
}

/// Solves `X L = B` for X, with L lower triangular (k x k) and B (m x k).
pub fn solve_right_lower(b: &Mat, l: &Mat) -> Mat {
    let k = l.rows;
    let mut x = b.clone();
    // column j of X: (B_j - sum_{p > j} X_p L[p, j]) / L[j, j]
    for j in (0..k).rev() {
        for p in j + 1..k {
            let lpj = l.get(p, j);
            if lpj != 0.0 {
                let (head, tail) = x.data.split_at_mut(x.rows * p);
                let xp = &tail[..x.rows];
                axpy(-lpj, xp, &mut head[x.rows * j..x.rows * (j + 1)]);
            }
        }
        let d = l.get(j, j);
        for v in x.col_mut(j) {
            *v /= d;
        }
    }
    x
}

/// Solves `L X = B` for X, with L lower triangular (k x k) and B (k x n).
pub fn solve_left_lower(l: &Mat, b: &Mat) -> Mat {
    let k = l.rows;
    let mut x = b.clone();
    for c in 0..x.cols {
        let col = x.col_mut(c);
        for i in 0..k {
            let mut s = col[i];
            for p in 0..i {
                s -= l.get(i, p) * col[p];
            }
            col[i] = s / l.get(i, i);
        }
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn gemm_matches_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(5, 7, &mut rng);
        let b = random(7, 3, &mut rng);
        let c = a.matmul(&b);
        for i in 0..5 {
            for j in 0..3 {
                let s: f64 = (0..7).map(|k| a.get(i, k) * b.get(k, j)).sum();
                assert!((c.get(i, j) - s).abs() < 1e-14);
            }
        }
        let ct = a.transpose().t_matmul(&b);
        assert!(ct.sub(&c).max_abs() < 1e-14);
        let c2 = a.matmul_t(&b.transpose());
        assert!(c2.sub(&c).max_abs() < 1e-14);
    }

    #[test]
    fn qr_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(m, n) in &[(8, 3), (3, 8), (6, 6), (1, 4), (4, 1)] {
            let a = random(m, n, &mut rng);
            let (q, r) = qr_thin(&a);
            assert!(q.matmul(&r).sub(&a).max_abs() < 1e-13);
            let qtq = q.t_matmul(&q);
            assert!(qtq.sub(&Mat::identity(q.cols)).max_abs() < 1e-13);
            for j in 0..r.cols {
                for i in j + 1..r.rows {
                    assert_eq!(r.get(i, j), 0.0);
                }
            }
        }
    }

    #[test]
    fn svd_reconstructs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &(m, n) in &[(10, 4), (4, 10), (7, 7)] {
            let a = random(m, n, &mut rng);
            let (u, s, v) = svd(&a);
            let k = s.len();
            let mut us = u.clone();
            for j in 0..k {
                for x in us.col_mut(j) {
                    *x *= s[j];
                }
            }
            assert!(us.matmul_t(&v).sub(&a).max_abs() < 1e-13);
            assert!(s.windows(2).all(|w| w[0] >= w[1]));
            assert!(v.t_matmul(&v).sub(&Mat::identity(k)).max_abs() < 1e-13);
        }
    }

    #[test]
    fn svd_rank_deficient() {
        let x = Mat::from_fn(6, 1, |i, _| i as f64 + 1.0);
        let y = Mat::from_fn(1, 5, |_, j| 2.0 - j as f64);
        let a = x.matmul(&y);
        let (_, s, _) = svd(&a);
        assert!(s[1] < 1e-13 * s[0]);
    }

    #[test]
    fn triangular_solves() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut l = random(4, 4, &mut rng);
        for j in 0..4 {
            for i in 0..j {
                l.set(i, j, 0.0);
            }
            l.set(j, j, 2.0 + l.get(j, j));
        }
        let b = random(6, 4, &mut rng);
        let x = solve_right_lower(&b, &l);
        assert!(x.matmul(&l).sub(&b).max_abs() < 1e-13);
        let b2 = random(4, 3, &mut rng);
        let x2 = solve_left_lower(&l, &b2);
        assert!(l.matmul(&x2).sub(&b2).max_abs() < 1e-13);
    }

    #[test]
    fn kron_convention() {
        let a = Mat::from_col_major(2, 2, vec![1.0, 3.0, 2.0, 4.0]).unwrap();
        let b = Mat::identity(2);
        let k = a.kron(&b);
        assert_eq!(k.get(0, 2), 2.0);
        assert_eq!(k.get(3, 1), 3.0);
        assert_eq!(k.get(1, 1), 1.0);
    }
}
