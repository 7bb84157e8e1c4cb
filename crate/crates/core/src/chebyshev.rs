//! Chebyshev grids, barycentric Lagrange evaluation, cluster basis and
//! transfer factors, and Kronecker products applied mode by mode.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geometry::{ClusterTree, Hypercube, PointSet};
use crate::linalg::Mat;

#[derive(Debug, Clone, PartialEq)]
pub struct ChebGrid1D {
    pub lo: f64,
    pub hi: f64,
    /// Ascending nodes.
    pub nodes: Vec<f64>,
    /// Barycentric weights (second form), aligned with `nodes`.
    pub weights: Vec<f64>,
}

/// Chebyshev points of the first kind on `[lo, hi]`, ascending.
pub fn cheb_grid(lo: f64, hi: f64, p: usize) -> Result<ChebGrid1D> {
    if p == 0 {
        return Err(Error::Input("a grid needs at least one node".into()));
    }
    if !(lo <= hi) {
        return Err(Error::Input("grid interval must satisfy lo <= hi".into()));
    }
    let (mut lo, mut hi) = (lo, hi);
    let pad = f64::EPSILON * (1.0 + libm::fabs(lo).max(libm::fabs(hi)));
    if hi - lo < pad {
        lo -= pad;
        hi += pad;
    }
    let mid = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let mut nodes = Vec::with_capacity(p);
    let mut weights = Vec::with_capacity(p);
    // k runs backwards so that cos(...) increases
    for k in (0..p).rev() {
        let a = (2 * k + 1) as f64 * PI / (2 * p) as f64;
        nodes.push(mid + half * libm::cos(a));
        let w = libm::sin(a);
        weights.push(if k % 2 == 0 { w } else { -w });
    }
    Ok(ChebGrid1D { lo, hi, nodes, weights })
}

impl ChebGrid1D {
    pub fn p(&self) -> usize {
        self.nodes.len()
    }

    /// All cardinal values `l_k(x)` written to `out`.
    pub fn lagrange_all(&self, x: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.p());
        if let Some(j) = self.nodes.iter().position(|&v| v == x) {
            out.iter_mut().for_each(|o| *o = 0.0);
            out[j] = 1.0;
            return;
        }
        let mut s = 0.0;
        for ((o, &w), &t) in out.iter_mut().zip(&self.weights).zip(&self.nodes) {
            *o = w / (x - t);
            s += *o;
        }
        for o in out.iter_mut() {
            *o /= s;
        }
    }

    pub fn lagrange_vec(&self, x: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.p()];
        self.lagrange_all(x, &mut out);
        out
    }

    /// Cardinal polynomial `l_k` at x (0-based k).
    pub fn lagrange(&self, k: usize, x: f64) -> f64 {
        self.lagrange_vec(x)[k]
    }
}

pub fn lagrange_eval(grid: &ChebGrid1D, k: usize, x: f64) -> Result<f64> {
    if k >= grid.p() {
        return Err(Error::Input("cardinal index out of range".into()));
    }
    Ok(grid.lagrange(k, x))
}

/// One grid per dimension of a box.
pub fn box_grids(b: &Hypercube, p: usize) -> Result<Vec<ChebGrid1D>> {
    (0..b.dim()).map(|k| cheb_grid(b.lo[k], b.hi[k], p)).collect()
}

/// Factor matrices `U_{sigma,k}` (n_sigma x p) of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBasisFactors {
    pub factors: Vec<Mat>,
}

impl ClusterBasisFactors {
    pub fn n(&self) -> usize {
        self.factors[0].rows
    }

    pub fn p(&self) -> usize {
        self.factors[0].cols
    }

    /// Row i of `U_{sigma,d} ⋉ ... ⋉ U_{sigma,1}`, dimension 1 fastest.
    pub fn kron_row(&self, i: usize, out: &mut Vec<f64>) {
        out.clear();
        out.push(1.0);
        let mut tmp = Vec::new();
        for f in &self.factors {
            tmp.clear();
            for j in 0..f.cols {
                let u = f.get(i, j);
                tmp.extend(out.iter().map(|v| v * u));
            }
            core::mem::swap(out, &mut tmp);
        }
    }

    /// Dense face-splitting product (n x p^d).
    pub fn assemble(&self) -> Mat {
        let n = self.n();
        let cols = self.p().pow(self.factors.len() as u32);
        let mut m = Mat::zeros(n, cols);
        let mut row = Vec::new();
        for i in 0..n {
            self.kron_row(i, &mut row);
            for (j, v) in row.iter().enumerate() {
                m.set(i, j, *v);
            }
        }
        m
    }

    /// `U^T x` (length p^d).
    pub fn apply_t(&self, x: &[f64]) -> Vec<f64> {
        let cols = self.p().pow(self.factors.len() as u32);
        let mut y = vec![0.0; cols];
        let mut row = Vec::new();
        for (i, &xi) in x.iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            self.kron_row(i, &mut row);
            for (yj, r) in y.iter_mut().zip(&row) {
                *yj += xi * r;
            }
        }
        y
    }

    /// `y += U z`
    pub fn apply_acc(&self, z: &[f64], y: &mut [f64]) {
        let mut row = Vec::new();
        for (i, yi) in y.iter_mut().enumerate() {
            self.kron_row(i, &mut row);
            *yi += crate::linalg::dot(&row, z);
        }
    }
}

pub fn cluster_basis_factors(
    tree: &ClusterTree,
    node: usize,
    points: &PointSet,
    p_s: usize,
) -> Result<ClusterBasisFactors> {
    let nd = tree.node(node);
    if nd.indices.is_empty() {
        return Err(Error::Input("cluster basis of an empty cluster".into()));
    }
    let grids = box_grids(&nd.bbox, p_s)?;
    let factors = grids
        .iter()
        .enumerate()
        .map(|(k, g)| {
            let mut m = Mat::zeros(nd.indices.len(), p_s);
            let mut row = vec![0.0; p_s];
            for (i, &gi) in nd.indices.iter().enumerate() {
                g.lagrange_all(points.point(gi)[k], &mut row);
                for j in 0..p_s {
                    m.set(i, j, row[j]);
                }
            }
            m
        })
        .collect();
    Ok(ClusterBasisFactors { factors })
}

/// `E_{child,k}[i, j] = l_i^{parent}(eta_j^{child})`, one p x p matrix per dimension.
pub fn transfer_factors(parent: &Hypercube, child: &Hypercube, p_s: usize) -> Result<Vec<Mat>> {
    let pg = box_grids(parent, p_s)?;
    let cg = box_grids(child, p_s)?;
    Ok(pg
        .iter()
        .zip(&cg)
        .map(|(pk, ck)| {
            let mut e = Mat::zeros(p_s, p_s);
            for j in 0..p_s {
                let col = pk.lagrange_vec(ck.nodes[j]);
                e.col_mut(j).copy_from_slice(&col);
            }
            e
        })
        .collect())
}

/// `(A_d ⊗ ... ⊗ A_1) x` with x indexed little-endian (dimension 1 fastest).
pub fn fast_kron(factors: &[Mat], x: &[f64]) -> Result<Vec<f64>> {
    fast_kron_counted(factors, x).map(|(y, _)| y)
}

/// As [`fast_kron`], also returning the number of multiply-adds.
pub fn fast_kron_counted(factors: &[Mat], x: &[f64]) -> Result<(Vec<f64>, u64)> {
    let q: usize = factors.iter().map(|a| a.cols).product();
    if q != x.len() {
        return Err(Error::Dimension { expected: q, found: x.len() });
    }
    // current shape: (m_1..m_{k-1}, q_k..q_d)
    let mut cur = x.to_vec();
    let mut flops = 0u64;
    let mut left = 1usize;
    for (k, a) in factors.iter().enumerate() {
        let right: usize = factors[k + 1..].iter().map(|f| f.cols).product();
        let (m, qk) = (a.rows, a.cols);
        let mut next = vec![0.0; left * m * right];
        for r in 0..right {
            for j in 0..qk {
                let src = &cur[left * (j + qk * r)..left * (j + qk * r + 1)];
                for i in 0..m {
                    let aij = a.get(i, j);
                    if aij == 0.0 {
                        continue;
                    }
                    let dst = &mut next[left * (i + m * r)..left * (i + m * r + 1)];
                    for (dv, sv) in dst.iter_mut().zip(src) {
                        *dv += aij * sv;
                    }
                }
            }
        }
        flops += (left * m * qk * right) as u64;
        left *= m;
        cur = next;
    }
    Ok((cur, flops))
}

/// Dense `A_d ⊗ ... ⊗ A_1`.
pub fn kron_all(factors: &[Mat]) -> Mat {
    let mut acc = Mat::identity(1);
    for a in factors {
        acc = a.kron(&acc);
    }
    acc
}
