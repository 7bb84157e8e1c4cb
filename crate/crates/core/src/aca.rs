//! Adaptive cross approximation with partial pivoting.

use alloc::vec;
use alloc::vec::Vec;

use crate::linalg::{dot, Mat};

/// Row/column access to an implicitly given matrix.
pub trait MatrixOracle {
    fn nrows(&self) -> usize;
    fn ncols(&self) -> usize;
    fn row(&mut self, i: usize, out: &mut [f64]);
    fn col(&mut self, j: usize, out: &mut [f64]);
}

/// `A ≈ U V^T` together with the pivots that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct LowRankFactors {
    /// m x t, residual columns.
    pub u: Mat,
    /// n x t, residual rows scaled by the pivot.
    pub v: Mat,
    /// Pivot rows in selection order.
    pub rows: Vec<usize>,
    /// Pivot columns in selection order.
    pub cols: Vec<usize>,
    /// Stopped at the rank cap before the tolerance was met.
    pub rank_capped: bool,
    /// Last ||u|| ||v|| / ||UV^T||_F estimate (the rejected or final term).
    pub residual_ratio: f64,
}

impl LowRankFactors {
    pub fn rank(&self) -> usize {
        self.u.cols
    }

    pub fn to_dense(&self) -> Mat {
        self.u.matmul_t(&self.v)
    }

    pub fn storage(&self) -> usize {
        self.u.data.len() + self.v.data.len()
    }
}

/// Partially pivoted ACA starting from `start_row`.
///
/// Stops when the next cross term satisfies `||u|| ||v|| <= eps ||S||_F`,
/// where `||S||_F` is the running Frobenius estimate of the approximant;
/// that term is not added.
pub fn aca_partial<O: MatrixOracle + ?Sized>(
    o: &mut O,
    eps: f64,
    r_max: usize,
    start_row: usize,
) -> LowRankFactors {
    aca_partial_seeded(o, eps, r_max, start_row, &[])
}

/// As [`aca_partial`], but first takes the given `(row, col)` pivots in
/// order (skipping any whose residual vanishes), then continues adaptively.
pub fn aca_partial_seeded<O: MatrixOracle + ?Sized>(
    o: &mut O,
    eps: f64,
    r_max: usize,
    start_row: usize,
    seed_pivots: &[(usize, usize)],
) -> LowRankFactors {
    let (m, n) = (o.nrows(), o.ncols());
    let r_cap = r_max.min(m).min(n);
    let mut us: Vec<Vec<f64>> = Vec::new();
    let mut vs: Vec<Vec<f64>> = Vec::new();
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    let mut row_used = vec![false; m];
    let mut col_used = vec![false; n];
    let mut norm2 = 0.0f64;
    let mut ratio = 0.0;
    let mut capped = false;
    let mut next_row = if m > 0 { start_row % m.max(1) } else { 0 };
    let mut zero_rows = 0usize;
    let mut rbuf = vec![0.0; n];
    let mut cbuf = vec![0.0; m];
    if m == 0 || n == 0 {
        return LowRankFactors {
            u: Mat::zeros(m, 0),
            v: Mat::zeros(n, 0),
            rows,
            cols,
            rank_capped: false,
            residual_ratio: 0.0,
        };
    }
    let mut small = 0usize;
    let mut state = (start_row as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
    let mut scale = 0.0f64;
    for &(i, j) in seed_pivots {
        if us.len() == r_cap {
            break;
        }
        if i >= m || j >= n || row_used[i] || col_used[j] {
            continue;
        }
        o.row(i, &mut rbuf);
        for (u, v) in us.iter().zip(&vs) {
            let ui = u[i];
            if ui != 0.0 {
                for (r, vj) in rbuf.iter_mut().zip(v) {
                    *r -= ui * vj;
                }
            }
        }
        scale = rbuf.iter().fold(scale, |a, r| a.max(libm::fabs(*r)));
        let delta = rbuf[j];
        if libm::fabs(delta) <= 1e-13 * scale {
            continue;
        }
        row_used[i] = true;
        let v: Vec<f64> = rbuf.iter().map(|r| r / delta).collect();
        o.col(j, &mut cbuf);
        for (uo, vo) in us.iter().zip(&vs) {
            let vj = vo[j];
            if vj != 0.0 {
                for (c, ui) in cbuf.iter_mut().zip(uo) {
                    *c -= vj * ui;
                }
            }
        }
        let u = cbuf.clone();
        let mut cross = 0.0;
        for (uo, vo) in us.iter().zip(&vs) {
            cross += dot(uo, &u) * dot(vo, &v);
        }
        norm2 = (norm2 + 2.0 * cross + dot(&u, &u) * dot(&v, &v)).max(0.0);
        col_used[j] = true;
        rows.push(i);
        cols.push(j);
        us.push(u);
        vs.push(v);
    }
    if let Some(last) = us.last() {
        let mut best = -1.0;
        let mut nr = usize::MAX;
        for (r, &x) in last.iter().enumerate() {
            if !row_used[r] && libm::fabs(x) > best {
                best = libm::fabs(x);
                nr = r;
            }
        }
        if nr == usize::MAX || us.len() >= m.min(n) || us.len() == r_cap {
            capped = us.len() == r_cap && r_cap < m.min(n);
            return finish(m, n, us, vs, rows, cols, capped, 0.0);
        }
        next_row = nr;
    }
    loop {
        let i = next_row;
        row_used[i] = true;
        o.row(i, &mut rbuf);
        for (u, v) in us.iter().zip(&vs) {
            let ui = u[i];
            if ui != 0.0 {
                for (r, vj) in rbuf.iter_mut().zip(v) {
                    *r -= ui * vj;
                }
            }
        }
        let mut j = usize::MAX;
        let mut best = 0.0;
        for (c, &r) in rbuf.iter().enumerate() {
            if !col_used[c] && libm::fabs(r) > best {
                best = libm::fabs(r);
                j = c;
            }
        }
        if j == usize::MAX {
            // residual row vanishes; try another row
            zero_rows += 1;
            match row_used.iter().position(|u| !u) {
                Some(r) if zero_rows < 4 || (us.is_empty() && zero_rows < m.min(64)) => {
                    next_row = r;
                    continue;
                }
                _ => break,
            }
        }
        let delta = rbuf[j];
        let v: Vec<f64> = rbuf.iter().map(|r| r / delta).collect();
        o.col(j, &mut cbuf);
        for (uo, vo) in us.iter().zip(&vs) {
            let vj = vo[j];
            if vj != 0.0 {
                for (c, ui) in cbuf.iter_mut().zip(uo) {
                    *c -= vj * ui;
                }
            }
        }
        let u = cbuf.clone();
        let uu = dot(&u, &u);
        let vv = dot(&v, &v);
        let mut cross = 0.0;
        for (uo, vo) in us.iter().zip(&vs) {
            cross += dot(uo, &u) * dot(vo, &v);
        }
        let new_norm2 = (norm2 + 2.0 * cross + uu * vv).max(0.0);
        let term = libm::sqrt(uu * vv);
        ratio = if new_norm2 > 0.0 { term / libm::sqrt(new_norm2) } else { 0.0 };
        if !us.is_empty() && term <= eps * libm::sqrt(new_norm2) {
            // a single small term can be a lucky row; confirm on fresh rows
            small += 1;
            match probe_row(&row_used, &mut state) {
                Some(r) if small <= PROBES => {
                    next_row = r;
                    continue;
                }
                _ => break,
            }
        }
        small = 0;
        if us.len() == r_cap {
            capped = r_cap < m.min(n);
            break;
        }
        norm2 = new_norm2;
        col_used[j] = true;
        rows.push(i);
        cols.push(j);
        us.push(u);
        vs.push(v);
        zero_rows = 0;
        // next row: largest entry of the new column among unused rows
        let last = us.last().unwrap();
        let mut nr = usize::MAX;
        let mut best = -1.0;
        for (r, &x) in last.iter().enumerate() {
            if !row_used[r] && libm::fabs(x) > best {
                best = libm::fabs(x);
                nr = r;
            }
        }
        if nr == usize::MAX || us.len() == m.min(n) {
            ratio = 0.0;
            break;
        }
        next_row = nr;
    }
    finish(m, n, us, vs, rows, cols, capped, ratio)
}

/// Extra rows tried before accepting the stopping test.
const PROBES: usize = 3;

/// Pseudo-random unused row (xorshift, then a linear scan).
fn probe_row(used: &[bool], state: &mut u64) -> Option<usize> {
    *state ^= *state << 13;
    *state ^= *state >> 7;
    *state ^= *state << 17;
    let m = used.len();
    let s = (*state % m as u64) as usize;
    (0..m).map(|k| (s + k) % m).find(|&r| !used[r])
}

#[allow(clippy::too_many_arguments)]
fn finish(
    m: usize,
    n: usize,
    us: Vec<Vec<f64>>,
    vs: Vec<Vec<f64>>,
    rows: Vec<usize>,
    cols: Vec<usize>,
    capped: bool,
    ratio: f64,
) -> LowRankFactors {
    let t = us.len();
    let mut um = Mat::zeros(m, t);
    let mut vm = Mat::zeros(n, t);
    for k in 0..t {
        um.col_mut(k).copy_from_slice(&us[k]);
        vm.col_mut(k).copy_from_slice(&vs[k]);
    }
    LowRankFactors { u: um, v: vm, rows, cols, rank_capped: capped, residual_ratio: ratio }
}

/// Dense matrix as an oracle (tests and small blocks).
pub struct DenseOracle<'a>(pub &'a Mat);

impl MatrixOracle for DenseOracle<'_> {
    fn nrows(&self) -> usize {
        self.0.rows
    }
    fn ncols(&self) -> usize {
        self.0.cols
    }
    fn row(&mut self, i: usize, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.0.get(i, j);
        }
    }
    fn col(&mut self, j: usize, out: &mut [f64]) {
        out.copy_from_slice(self.0.col(j));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn rank_one_exact() {
        let a = Mat::from_fn(7, 5, |i, j| (i as f64 + 1.0) * (0.5 - j as f64));
        let f = aca_partial(&mut DenseOracle(&a), 1e-10, 50, 0);
        assert_eq!(f.rank(), 1);
        assert!(f.to_dense().sub(&a).max_abs() < 1e-14);
    }

    #[test]
    fn zero_matrix() {
        let a = Mat::zeros(6, 4);
        let f = aca_partial(&mut DenseOracle(&a), 1e-6, 10, 0);
        assert_eq!(f.rank(), 0);
    }

    #[test]
    fn smooth_kernel_block() {
        let x: Vec<f64> = (0..40).map(|i| i as f64 / 40.0).collect();
        let y: Vec<f64> = (0..30).map(|i| 3.0 + i as f64 / 30.0).collect();
        let a = Mat::from_fn(40, 30, |i, j| libm::exp(-(x[i] - y[j]).powi(2)));
        let f = aca_partial(&mut DenseOracle(&a), 1e-6, 30, 0);
        assert!(f.to_dense().sub(&a).max_abs() <= 1e-5 * a.max_abs());
        assert!(f.rank() < 15);
    }

    #[test]
    fn rank_cap_flag() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Mat::from_fn(20, 20, |_, _| rng.gen::<f64>());
        let f = aca_partial(&mut DenseOracle(&a), 1e-12, 3, 0);
        assert_eq!(f.rank(), 3);
        assert!(f.rank_capped);
    }

    #[test]
    fn pivots_are_interpolated() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = Mat::from_fn(12, 3, |_, _| rng.gen::<f64>());
        let c = Mat::from_fn(3, 9, |_, _| rng.gen::<f64>());
        let a = b.matmul(&c);
        let f = aca_partial(&mut DenseOracle(&a), 1e-12, 20, 4);
        assert_eq!(f.rank(), 3);
        let d = f.to_dense();
        for &i in &f.rows {
            for j in 0..9 {
                assert!((d.get(i, j) - a.get(i, j)).abs() < 1e-13);
            }
        }
    }
    #[test]
    fn seeded_pivots_come_first() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = Mat::from_fn(15, 4, |_, _| rng.gen::<f64>());
        let c = Mat::from_fn(4, 11, |_, _| rng.gen::<f64>());
        let a = b.matmul(&c);
        let f = aca_partial_seeded(&mut DenseOracle(&a), 1e-12, 20, 0, &[(7, 2), (3, 9)]);
        assert_eq!(&f.rows[..2], &[7, 3]);
        assert_eq!(&f.cols[..2], &[2, 9]);
        assert_eq!(f.rank(), 4);
        assert!(f.to_dense().sub(&a).max_abs() < 1e-12);
    }

    #[test]
    fn redundant_seed_is_skipped() {
        let a = Mat::from_fn(8, 6, |i, j| (i as f64 + 1.0) * (j as f64 - 2.5));
        let f = aca_partial_seeded(&mut DenseOracle(&a), 1e-12, 10, 0, &[(1, 1), (4, 5)]);
        assert_eq!(f.rank(), 1);
        assert!(f.to_dense().sub(&a).max_abs() < 1e-13);
    }

    #[test]
    fn probes_find_hidden_block() {
        // block diagonal: the first pivot row sees only the top block
        let a = Mat::from_fn(40, 40, |i, j| match (i < 20, j < 20) {
            (true, true) => 1.0 + 0.01 * (i * j) as f64,
            (false, false) => 1.0 / (1.0 + (i + j) as f64),
            _ => 0.0,
        });
        let f = aca_partial(&mut DenseOracle(&a), 1e-10, 40, 0);
        assert!(f.to_dense().sub(&a).max_abs() <= 1e-8 * a.max_abs());
    }
}
