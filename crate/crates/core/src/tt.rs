//! Tensor trains: container, unfoldings, TT-cross and TT-rounding.
//!
//! Core `i` has shape `(r_{i-1}, m_i, r_i)` and is stored with the first index
//! fastest, so both unfoldings are plain reinterpretations of the buffer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::aca::{aca_partial_seeded, LowRankFactors, MatrixOracle};
use crate::error::{Error, Result};
use crate::linalg::{qr_thin, solve_right_lower, svd, Mat};

/// Largest dense tensor `full()` will build.
pub const FULL_LIMIT: usize = 10_000_000;

#[derive(Debug, Clone, PartialEq)]
pub struct TtCore {
    pub r0: usize,
    pub m: usize,
    pub r1: usize,
    /// Entry (a, i, b) at `a + r0 * (i + m * b)`.
    pub data: Vec<f64>,
}

impl TtCore {
    pub fn new(r0: usize, m: usize, r1: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != r0 * m * r1 {
            return Err(Error::Dimension { expected: r0 * m * r1, found: data.len() });
        }
        Ok(Self { r0, m, r1, data })
    }

    pub fn zeros(r0: usize, m: usize, r1: usize) -> Self {
        Self { r0, m, r1, data: vec![0.0; r0 * m * r1] }
    }

    #[inline]
    pub fn get(&self, a: usize, i: usize, b: usize) -> f64 {
        self.data[a + self.r0 * (i + self.m * b)]
    }

    /// `r0 x (m r1)`
    pub fn unfold_left(&self) -> Mat {
        Mat { rows: self.r0, cols: self.m * self.r1, data: self.data.clone() }
    }

    /// `(r0 m) x r1`
    pub fn unfold_right(&self) -> Mat {
        Mat { rows: self.r0 * self.m, cols: self.r1, data: self.data.clone() }
    }

    pub fn from_left(mat: Mat, m: usize) -> Result<Self> {
        if m == 0 || mat.cols % m != 0 {
            return Err(Error::Input(format!("{} columns not divisible by mode size {m}", mat.cols)));
        }
        Ok(Self { r0: mat.rows, m, r1: mat.cols / m, data: mat.data })
    }

    pub fn from_right(mat: Mat, m: usize) -> Result<Self> {
        if m == 0 || mat.rows % m != 0 {
            return Err(Error::Input(format!("{} rows not divisible by mode size {m}", mat.rows)));
        }
        Ok(Self { r0: mat.rows / m, m, r1: mat.cols, data: mat.data })
    }

    /// `G[:, i, :]`
    pub fn slice(&self, i: usize) -> Mat {
        Mat::from_fn(self.r0, self.r1, |a, b| self.get(a, i, b))
    }

    /// `G ×_2 v = Σ_i v_i G[:, i, :]`
    pub fn contract_mode2(&self, v: &[f64]) -> Mat {
        debug_assert_eq!(v.len(), self.m);
        let mut out = Mat::zeros(self.r0, self.r1);
        for b in 0..self.r1 {
            for (i, &vi) in v.iter().enumerate() {
                if vi == 0.0 {
                    continue;
                }
                let src = &self.data[self.r0 * (i + self.m * b)..self.r0 * (i + self.m * b + 1)];
                for (o, s) in out.col_mut(b).iter_mut().zip(src) {
                    *o += vi * s;
                }
            }
        }
        out
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TtTensor {
    pub cores: Vec<TtCore>,
}

impl TtTensor {
    pub fn new(cores: Vec<TtCore>) -> Result<Self> {
        if cores.is_empty() {
            return Err(Error::Input("a tensor train needs at least one core".into()));
        }
        if cores[0].r0 != 1 || cores[cores.len() - 1].r1 != 1 {
            return Err(Error::Input("boundary ranks must be 1".into()));
        }
        for w in cores.windows(2) {
            if w[0].r1 != w[1].r0 {
                return Err(Error::Dimension { expected: w[0].r1, found: w[1].r0 });
            }
        }
        Ok(Self { cores })
    }

    pub fn order(&self) -> usize {
        self.cores.len()
    }

    pub fn modes(&self) -> Vec<usize> {
        self.cores.iter().map(|c| c.m).collect()
    }

    /// r_0..r_q
    pub fn ranks(&self) -> Vec<usize> {
        let mut r = vec![1];
        r.extend(self.cores.iter().map(|c| c.r1));
        r
    }

    pub fn max_rank(&self) -> usize {
        self.ranks().into_iter().max().unwrap_or(1)
    }

    /// Number of stored scalars.
    pub fn storage(&self) -> usize {
        self.cores.iter().map(|c| c.len()).sum()
    }

    pub fn entry(&self, idx: &[usize]) -> Result<f64> {
        if idx.len() != self.order() {
            return Err(Error::Dimension { expected: self.order(), found: idx.len() });
        }
        for (k, (&i, c)) in idx.iter().zip(&self.cores).enumerate() {
            if i >= c.m {
                return Err(Error::Input(format!("index {i} out of range in mode {k}")));
            }
        }
        Ok(self.entry_unchecked(idx))
    }

    pub fn entry_unchecked(&self, idx: &[usize]) -> f64 {
        let mut v = vec![1.0];
        let mut w = Vec::new();
        for (c, &i) in self.cores.iter().zip(idx) {
            w.clear();
            w.resize(c.r1, 0.0);
            for (b, wb) in w.iter_mut().enumerate() {
                let base = c.r0 * (i + c.m * b);
                let mut s = 0.0;
                for (a, va) in v.iter().enumerate() {
                    s += va * c.data[base + a];
                }
                *wb = s;
            }
            core::mem::swap(&mut v, &mut w);
        }
        v[0]
    }

    pub fn full(&self) -> Result<DenseTensor> {
        let total: usize = self.modes().iter().product();
        if total > FULL_LIMIT {
            return Err(Error::TooLarge { entries: total, limit: FULL_LIMIT });
        }
        // left-to-right: partial (prod m_1..m_k) x r_k, first index fastest
        let mut acc = Mat { rows: 1, cols: 1, data: vec![1.0] };
        for c in &self.cores {
            let next = acc.matmul(&c.unfold_left());
            // next is (P) x (m r1); reinterpret as (P m) x r1
            acc = next.reshape(acc.rows * c.m, c.r1)?;
        }
        DenseTensor::new(self.modes(), acc.data)
    }

    /// Frobenius norm by contracting the Gram chain.
    pub fn frobenius(&self) -> f64 {
        let mut w = Mat::identity(1);
        for c in &self.cores {
            let mut next = Mat::zeros(c.r1, c.r1);
            for i in 0..c.m {
                let s = c.slice(i);
                let t = w.matmul(&s);
                next = add(&next, &s.t_matmul(&t));
            }
            w = next;
        }
        libm::sqrt(w.get(0, 0).max(0.0))
    }

    /// Random Gaussian-free test train with entries uniform in [-1, 1].
    pub fn random<R: Rng>(modes: &[usize], ranks: &[usize], rng: &mut R) -> Result<Self> {
        if ranks.len() != modes.len() + 1 {
            return Err(Error::Dimension { expected: modes.len() + 1, found: ranks.len() });
        }
        let cores = modes
            .iter()
            .enumerate()
            .map(|(k, &m)| {
                let n = ranks[k] * m * ranks[k + 1];
                TtCore { r0: ranks[k], m, r1: ranks[k + 1], data: (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect() }
            })
            .collect();
        Self::new(cores)
    }
}

fn add(a: &Mat, b: &Mat) -> Mat {
    let data = a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect();
    Mat { rows: a.rows, cols: a.cols, data }
}

/// Dense tensor, first index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl DenseTensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Dimension { expected: n, found: data.len() });
        }
        Ok(Self { shape, data })
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        let mut s = 0;
        let mut stride = 1;
        for (i, m) in idx.iter().zip(&self.shape) {
            s += i * stride;
            stride *= m;
        }
        s
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.linear_index(idx)]
    }

    pub fn frobenius(&self) -> f64 {
        crate::linalg::norm2(&self.data)
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(libm::fabs(*v)))
    }
}

/// `Y = X ×_k M`, i.e. `Y[.., j, ..] = Σ_i M[j, i] X[.., i, ..]`.
pub fn mode_k_product(x: &DenseTensor, k: usize, m: &Mat) -> Result<DenseTensor> {
    if k >= x.shape.len() {
        return Err(Error::Input(format!("mode {k} out of range")));
    }
    if m.cols != x.shape[k] {
        return Err(Error::Dimension { expected: x.shape[k], found: m.cols });
    }
    let left: usize = x.shape[..k].iter().product();
    let right: usize = x.shape[k + 1..].iter().product();
    let mk = x.shape[k];
    let mut shape = x.shape.clone();
    shape[k] = m.rows;
    let mut data = vec![0.0; left * m.rows * right];
    for r in 0..right {
        for i in 0..mk {
            let src = &x.data[left * (i + mk * r)..left * (i + mk * r + 1)];
            for j in 0..m.rows {
                let w = m.get(j, i);
                if w == 0.0 {
                    continue;
                }
                let dst = &mut data[left * (j + m.rows * r)..left * (j + m.rows * r + 1)];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
    DenseTensor::new(shape, data)
}

/// `X ×_k v` for a vector: contracts and removes mode k.
pub fn mode_k_vec(x: &DenseTensor, k: usize, v: &[f64]) -> Result<DenseTensor> {
    let row = Mat { rows: 1, cols: v.len(), data: v.to_vec() };
    let mut y = mode_k_product(x, k, &row)?;
    y.shape.remove(k);
    Ok(y)
}

/// Entry access to a (usually implicit) tensor. Must be deterministic.
pub trait EntryOracle {
    fn shape(&self) -> Vec<usize>;
    fn entry(&self, idx: &[usize]) -> f64;
}

impl EntryOracle for DenseTensor {
    fn shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn entry(&self, idx: &[usize]) -> f64 {
        self.get(idx)
    }
}

impl EntryOracle for TtTensor {
    fn shape(&self) -> Vec<usize> {
        self.modes()
    }
    fn entry(&self, idx: &[usize]) -> f64 {
        self.entry_unchecked(idx)
    }
}

/// Closure-backed oracle.
pub struct FnOracle<F: Fn(&[usize]) -> f64> {
    pub shape: Vec<usize>,
    pub f: F,
}

impl<F: Fn(&[usize]) -> f64> EntryOracle for FnOracle<F> {
    fn shape(&self) -> Vec<usize> {
        self.shape.clone()
    }
    fn entry(&self, idx: &[usize]) -> f64 {
        (self.f)(idx)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossOptions {
    pub eps: f64,
    pub r_max: usize,
    pub min_sweeps: usize,
    pub max_sweeps: usize,
    /// Random entries used for the relative max-norm error estimate.
    pub n_samples: usize,
    pub seed: u64,
    /// Apply TT-rounding at `eps` after the sweeps.
    pub round: bool,
    /// Stopping tolerance of the supercore ACA; tighter than `eps` because a
    /// Frobenius-type stop leaves a max-norm error of a few times its value.
    pub aca_eps: f64,
}

impl CrossOptions {
    pub fn new(eps: f64, r_max: usize, seed: u64) -> Self {
        Self { eps, r_max, min_sweeps: 2, max_sweeps: 10, n_samples: 1000, seed, round: true, aca_eps: eps / 100.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossResult {
    pub tt: TtTensor,
    /// max |approx - exact| / max |exact| over the sample set.
    pub error_estimate: f64,
    pub rank_capped: bool,
    pub converged: bool,
    pub sweeps: usize,
    /// Distinct entries evaluated by the sweeps.
    pub evals: u64,
    /// Distinct entries evaluated only for the error estimate.
    pub sample_evals: u64,
    /// Largest final ACA stopping ratio over the supercores of the last sweep.
    pub max_residual_ratio: f64,
}

struct EntryCache<'a, O: EntryOracle + ?Sized> {
    oracle: &'a O,
    strides: Vec<u64>,
    map: HashMap<u64, f64>,
    misses: u64,
    scratch: Vec<usize>,
}

impl<'a, O: EntryOracle + ?Sized> EntryCache<'a, O> {
    fn new(oracle: &'a O, modes: &[usize]) -> Self {
        let mut strides = Vec::with_capacity(modes.len());
        let mut s = 1u64;
        for &m in modes {
            strides.push(s);
            s = s.saturating_mul(m as u64);
        }
        Self { oracle, strides, map: HashMap::new(), misses: 0, scratch: Vec::with_capacity(modes.len()) }
    }

    fn key(&self, idx: &[usize]) -> u64 {
        idx.iter().zip(&self.strides).map(|(&i, &s)| i as u64 * s).sum()
    }

    #[inline]
    fn get(&mut self, idx: &[usize]) -> f64 {
        let key = self.key(idx);
        self.get_keyed(key, |buf| buf.extend_from_slice(idx))
    }

    /// Lookup by linear key; `build` writes the multi-index on a miss.
    #[inline]
    fn get_keyed(&mut self, key: u64, build: impl FnOnce(&mut Vec<usize>)) -> f64 {
        if let Some(v) = self.map.get(&key) {
            return *v;
        }
        self.misses += 1;
        let mut idx = core::mem::take(&mut self.scratch);
        idx.clear();
        build(&mut idx);
        let v = self.oracle.entry(&idx);
        self.scratch = idx;
        self.map.insert(key, v);
        v
    }
}

/// Supercore at bond k: rows (I_{k-1}, i_{k-1}), columns (i_k, J_{k+1}).
struct Supercore<'c, 'a, O: EntryOracle + ?Sized> {
    cache: &'c mut EntryCache<'a, O>,
    left: &'c [Vec<usize>],
    right: &'c [Vec<usize>],
    left_keys: Vec<u64>,
    right_keys: Vec<u64>,
    stride_row: u64,
    stride_col: u64,
    m_row: usize,
    m_col: usize,
}

impl<'c, 'a, O: EntryOracle + ?Sized> Supercore<'c, 'a, O> {
    fn new(
        cache: &'c mut EntryCache<'a, O>,
        left: &'c [Vec<usize>],
        right: &'c [Vec<usize>],
        k: usize,
        m_row: usize,
        m_col: usize,
    ) -> Self {
        let left_keys = left.iter().map(|v| cache.key(v)).collect();
        let right_keys = right.iter().map(|v| v.iter().zip(&cache.strides[k + 1..]).map(|(&i, &s)| i as u64 * s).sum()).collect();
        let (stride_row, stride_col) = (cache.strides[k - 1], cache.strides[k]);
        Self { cache, left, right, left_keys, right_keys, stride_row, stride_col, m_row, m_col }
    }

    #[inline]
    fn fill(&mut self, a: usize, i: usize, j: usize, b: usize) -> f64 {
        let key = self.left_keys[a] + i as u64 * self.stride_row + j as u64 * self.stride_col + self.right_keys[b];
        let (left, right) = (&self.left[a], &self.right[b]);
        self.cache.get_keyed(key, |buf| {
            buf.extend_from_slice(left);
            buf.push(i);
            buf.push(j);
            buf.extend_from_slice(right);
        })
    }
}

impl<O: EntryOracle + ?Sized> MatrixOracle for Supercore<'_, '_, O> {
    fn nrows(&self) -> usize {
        self.left.len() * self.m_row
    }
    fn ncols(&self) -> usize {
        self.m_col * self.right.len()
    }
    fn row(&mut self, r: usize, out: &mut [f64]) {
        let nl = self.left.len();
        let (a, i) = (r % nl, r / nl);
        for (c, o) in out.iter_mut().enumerate() {
            let (j, b) = (c % self.m_col, c / self.m_col);
            *o = self.fill(a, i, j, b);
        }
    }
    fn col(&mut self, c: usize, out: &mut [f64]) {
        let nl = self.left.len();
        let (j, b) = (c % self.m_col, c / self.m_col);
        for (r, o) in out.iter_mut().enumerate() {
            let (a, i) = (r % nl, r / nl);
            *o = self.fill(a, i, j, b);
        }
    }
}

fn lower_part(m: &Mat) -> Mat {
    Mat::from_fn(m.rows, m.cols, |i, j| if i >= j { m.get(i, j) } else { 0.0 })
}

fn select_rows(m: &Mat, rows: &[usize]) -> Mat {
    Mat::from_fn(rows.len(), m.cols, |p, k| m.get(rows[p], k))
}

/// Cross-interpolation factors of one supercore; rank 0 becomes a zero rank-1 cross.
fn split_factors(f: LowRankFactors, start_row: usize) -> LowRankFactors {
    if f.rank() > 0 {
        return f;
    }
    let (m, n) = (f.u.rows, f.v.rows);
    LowRankFactors {
        u: Mat::zeros(m, 1),
        v: Mat::zeros(n, 1),
        rows: vec![start_row % m.max(1)],
        cols: vec![0],
        rank_capped: f.rank_capped,
        residual_ratio: f.residual_ratio,
    }
}

/// `U U_R^{-1}` (interpolatory left factor).
fn left_interp(f: &LowRankFactors) -> Mat {
    let mut ur = lower_part(&select_rows(&f.u, &f.rows));
    for k in 0..ur.rows {
        if ur.get(k, k) == 0.0 {
            ur.set(k, k, 1.0);
        }
    }
    solve_right_lower(&f.u, &ur)
}

/// `(V_C^T)^{-1} V^T` (interpolatory right factor), r x n.
fn right_interp(f: &LowRankFactors) -> Mat {
    let mut vc = lower_part(&select_rows(&f.v, &f.cols));
    for k in 0..vc.rows {
        if vc.get(k, k) == 0.0 {
            vc.set(k, k, 1.0);
        }
    }
    solve_right_lower(&f.v, &vc).transpose()
}

/// Earlier pivots of a bond expressed as (row, column) of the current supercore.
fn seed_pivots(
    old: &[(Vec<usize>, Vec<usize>)],
    left: &[Vec<usize>],
    right: &[Vec<usize>],
    m_row: usize,
    m_col: usize,
) -> Vec<(usize, usize)> {
    if old.is_empty() {
        return Vec::new();
    }
    let lmap: HashMap<&[usize], usize> = left.iter().enumerate().map(|(a, v)| (v.as_slice(), a)).collect();
    let rmap: HashMap<&[usize], usize> = right.iter().enumerate().map(|(b, v)| (v.as_slice(), b)).collect();
    let nl = left.len();
    old.iter()
        .filter_map(|(row, col)| {
            let (head, i) = row.split_at(row.len() - 1);
            let a = *lmap.get(head)?;
            let b = *rmap.get(&col[1..])?;
            Some((a + nl * i[0], col[0] + m_col * b))
        })
        .filter(|&(r, _)| r < nl * m_row)
        .collect()
}

/// TT-cross: alternating supercore sweeps with partially pivoted ACA,
/// started from one random index, followed by TT-rounding.
pub fn tt_cross<O: EntryOracle + ?Sized>(oracle: &O, opts: &CrossOptions) -> Result<CrossResult> {
    let modes = oracle.shape();
    let q = modes.len();
    if q == 0 || modes.iter().any(|&m| m == 0) {
        return Err(Error::Input("tt_cross needs a non-empty shape".into()));
    }
    if !(opts.eps > 0.0) {
        return Err(Error::Input("tt_cross needs eps > 0".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut cache = EntryCache::new(oracle, &modes);

    // sample set for the error estimate
    let total: u128 = modes.iter().map(|&m| m as u128).product();
    let mut samples: Vec<Vec<usize>> = Vec::new();
    if total <= opts.n_samples as u128 {
        let mut idx = vec![0usize; q];
        for _ in 0..total {
            samples.push(idx.clone());
            for k in 0..q {
                idx[k] += 1;
                if idx[k] < modes[k] {
                    break;
                }
                idx[k] = 0;
            }
        }
    } else {
        for _ in 0..opts.n_samples {
            samples.push(modes.iter().map(|&m| rng.gen_range(0..m)).collect());
        }
    }
    let start: Vec<usize> = modes.iter().map(|&m| rng.gen_range(0..m)).collect();
    let before = cache.misses;
    let sample_vals: Vec<f64> = samples.iter().map(|s| cache.get(s)).collect();
    let sample_evals = cache.misses - before;
    let scale = sample_vals.iter().fold(0.0f64, |m, v| m.max(libm::fabs(*v)));
    let estimate = |tt: &TtTensor| -> f64 {
        let err = samples
            .iter()
            .zip(&sample_vals)
            .fold(0.0f64, |m, (s, v)| m.max(libm::fabs(tt.entry_unchecked(s) - v)));
        if scale > 0.0 {
            err / scale
        } else {
            err
        }
    };

    if q == 1 {
        let data: Vec<f64> = (0..modes[0]).map(|i| cache.get(&[i])).collect();
        let tt = TtTensor::new(vec![TtCore { r0: 1, m: modes[0], r1: 1, data }])?;
        let evals = cache.misses - sample_evals;
        return Ok(CrossResult {
            error_estimate: estimate(&tt),
            tt,
            rank_capped: false,
            converged: true,
            sweeps: 1,
            evals,
            sample_evals,
            max_residual_ratio: 0.0,
        });
    }

    // left[k]: multi-indices over modes 0..k; right[k]: over modes k..q
    let mut left: Vec<Vec<Vec<usize>>> = (0..=q).map(|k| vec![start[..k].to_vec()]).collect();
    let mut right: Vec<Vec<Vec<usize>>> = (0..=q).map(|k| vec![start[k..].to_vec()]).collect();
    let mut cores: Vec<TtCore> = modes.iter().map(|&m| TtCore::zeros(1, m, 1)).collect();
    // pivots[k]: (row over modes 0..k, column over modes k..q) of the last cross at bond k
    let mut pivots: Vec<Vec<(Vec<usize>, Vec<usize>)>> = vec![Vec::new(); q];
    let mut sweeps = 0;
    let mut capped = false;
    let mut max_ratio = 0.0f64;
    let mut est = f64::INFINITY;
    let mut prev_ranks: Vec<usize> = Vec::new();

    while sweeps < opts.max_sweeps {
        let forward = sweeps % 2 == 0;
        capped = false;
        max_ratio = 0.0;
        let bonds: Vec<usize> = if forward { (1..q).collect() } else { (1..q).rev().collect() };
        for &k in &bonds {
            // supercore over modes k-1 and k
            let (m_row, m_col) = (modes[k - 1], modes[k]);
            let nl = left[k - 1].len();
            let nr = right[k + 1].len();
            let start_row = rng.gen_range(0..nl * m_row);
            let seeds = seed_pivots(&pivots[k], &left[k - 1], &right[k + 1], m_row, m_col);
            let f = {
                let mut sc = Supercore::new(&mut cache, &left[k - 1], &right[k + 1], k, m_row, m_col);
                aca_partial_seeded(&mut sc, opts.aca_eps, opts.r_max, start_row, &seeds)
            };
            capped |= f.rank_capped;
            max_ratio = max_ratio.max(f.residual_ratio);
            let f = split_factors(f, start_row);
            let r = f.rank();
            let new_left: Vec<Vec<usize>> = f
                .rows
                .iter()
                .map(|&row| {
                    let mut v = left[k - 1][row % nl].clone();
                    v.push(row / nl);
                    v
                })
                .collect();
            let new_right: Vec<Vec<usize>> = f
                .cols
                .iter()
                .map(|&c| {
                    let mut v = vec![c % m_col];
                    v.extend_from_slice(&right[k + 1][c / m_col]);
                    v
                })
                .collect();
            pivots[k] = new_left.iter().cloned().zip(new_right.iter().cloned()).collect();
            if forward {
                let g = left_interp(&f);
                cores[k - 1] = TtCore { r0: nl, m: m_row, r1: r, data: g.data };
                left[k] = new_left;
                if k == q - 1 {
                    let last = select_rows(&f.u, &f.rows).matmul_t(&f.v);
                    cores[k] = TtCore { r0: r, m: m_col, r1: nr, data: last.data };
                }
            } else {
                let g = right_interp(&f);
                cores[k] = TtCore { r0: r, m: m_col, r1: nr, data: g.data };
                right[k] = new_right;
                if k == 1 {
                    let first = f.u.matmul_t(&select_rows(&f.v, &f.cols));
                    cores[0] = TtCore { r0: nl, m: m_row, r1: r, data: first.data };
                }
            }
        }
        sweeps += 1;
        // reconcile ranks of untouched neighbours: the chain is consistent after a full sweep
        let tt = TtTensor::new(cores.clone())?;
        let ranks = tt.ranks();
        if sweeps < opts.min_sweeps {
            prev_ranks = ranks;
            continue;
        }
        est = estimate(&tt);
        let stalled = ranks == prev_ranks;
        prev_ranks = ranks;
        if est <= opts.eps || stalled {
            break;
        }
    }
    let mut tt = TtTensor::new(cores)?;
    if opts.round {
        tt = tt_rounding(&tt, opts.eps);
        est = estimate(&tt);
    } else if est.is_infinite() {
        est = estimate(&tt);
    }
    let evals = cache.misses - sample_evals;
    Ok(CrossResult {
        tt,
        error_estimate: est,
        rank_capped: capped,
        converged: est <= opts.eps,
        sweeps,
        evals,
        sample_evals,
        max_residual_ratio: max_ratio,
    })
}

/// TT-rounding: right-to-left QR orthogonalization, then left-to-right
/// truncated SVDs. Singular values below `eps ||X|| / sqrt((q-1) k)` are
/// dropped (k = number of singular values of that unfolding), which keeps
/// the Frobenius error below `eps ||X||` and makes the operation idempotent.
pub fn tt_rounding(tt: &TtTensor, eps: f64) -> TtTensor {
    let q = tt.order();
    if q == 1 {
        return tt.clone();
    }
    let mut cores = tt.cores.clone();
    for k in (1..q).rev() {
        let c = &cores[k];
        let gt = c.unfold_left().transpose(); // (m r1) x r0
        let (qm, r) = qr_thin(&gt);
        let new_r0 = qm.cols;
        cores[k] = TtCore { r0: new_r0, m: c.m, r1: c.r1, data: qm.transpose().data };
        let prev = &cores[k - 1];
        let merged = prev.unfold_right().matmul_t(&r); // (r0 m) x new_r0
        cores[k - 1] = TtCore { r0: prev.r0, m: prev.m, r1: new_r0, data: merged.data };
    }
    let norm = crate::linalg::norm2(&cores[0].data);
    let base = eps * norm / libm::sqrt((q - 1) as f64);
    for k in 0..q - 1 {
        let c = &cores[k];
        let a = c.unfold_right();
        let (u, s, v) = svd(&a);
        let thr = base / libm::sqrt(s.len().max(1) as f64);
        let mut keep = s.iter().take_while(|&&x| x > thr).count();
        keep = keep.max(1);
        let uk = u.leading_cols(keep);
        let mut sv = v.leading_cols(keep).transpose(); // keep x r1
        for j in 0..sv.cols {
            for i in 0..keep {
                let val = sv.get(i, j) * s[i];
                sv.set(i, j, val);
            }
        }
        cores[k] = TtCore { r0: c.r0, m: c.m, r1: keep, data: uk.data };
        let next = &cores[k + 1];
        let merged = sv.matmul(&next.unfold_left());
        cores[k + 1] = TtCore { r0: keep, m: next.m, r1: next.r1, data: merged.data };
    }
    TtTensor { cores }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, prop_oneof, proptest, Just, ProptestConfig};

    fn max_rel(a: &DenseTensor, b: &DenseTensor) -> f64 {
        let e = a.data.iter().zip(&b.data).fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
        e / b.max_abs()
    }

    #[test]
    fn ones_and_separable() {
        let ones = TtTensor::new(vec![
            TtCore::new(1, 2, 1, vec![1.0; 2]).unwrap(),
            TtCore::new(1, 2, 1, vec![1.0; 2]).unwrap(),
            TtCore::new(1, 2, 1, vec![1.0; 2]).unwrap(),
        ])
        .unwrap();
        assert_eq!(ones.full().unwrap().data, vec![1.0; 8]);
        let a = [1.0, 2.0, 3.0];
        let b = [0.5, -1.0];
        let c = [2.0, 4.0, 8.0, 16.0];
        let t = TtTensor::new(vec![
            TtCore::new(1, 3, 1, a.to_vec()).unwrap(),
            TtCore::new(1, 2, 1, b.to_vec()).unwrap(),
            TtCore::new(1, 4, 1, c.to_vec()).unwrap(),
        ])
        .unwrap();
        for i in 0..3 {
            for j in 0..2 {
                for k in 0..4 {
                    assert_eq!(t.entry(&[i, j, k]).unwrap(), a[i] * b[j] * c[k]);
                }
            }
        }
        assert!(t.entry(&[3, 0, 0]).is_err());
        assert!(t.entry(&[0, 0]).is_err());
    }

    #[test]
    fn entry_matches_full() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = TtTensor::random(&[3, 4, 2, 5], &[1, 2, 3, 2, 1], &mut rng).unwrap();
        let f = t.full().unwrap();
        for _ in 0..50 {
            let idx: Vec<usize> = t.modes().iter().map(|&m| rng.gen_range(0..m)).collect();
            assert!((f.get(&idx) - t.entry(&idx).unwrap()).abs() < 1e-14);
        }
        let s: f64 = f.data.iter().map(|x| x * x).sum();
        assert!((t.frobenius() - s.sqrt()).abs() < 1e-12 * s.sqrt());
        assert!((f.frobenius() - s.sqrt()).abs() < 1e-12 * s.sqrt());
    }

    #[test]
    fn unfoldings() {
        let c = TtCore::new(2, 3, 4, (0..24).map(|x| x as f64).collect()).unwrap();
        let l = c.unfold_left();
        let r = c.unfold_right();
        assert_eq!((l.rows, l.cols, r.rows, r.cols), (2, 12, 6, 4));
        // (a, i, b) -> left column i + m b, right row a + r0 i
        assert_eq!(l.get(1, 2 + 3 * 3), c.get(1, 2, 3));
        assert_eq!(r.get(1 + 2 * 2, 3), c.get(1, 2, 3));
        assert_eq!(TtCore::from_left(l, 3).unwrap(), c);
        assert_eq!(TtCore::from_right(r, 3).unwrap(), c);
        let v = TtCore::new(1, 5, 1, vec![1.0; 5]).unwrap();
        assert_eq!((v.unfold_left().rows, v.unfold_right().cols), (1, 1));
        let d = DenseTensor::new(vec![3, 4], (0..12).map(|x| x as f64).collect()).unwrap();
        assert_eq!(d.linear_index(&[2, 1]), 2 + 3);
    }

    #[test]
    fn mode_products() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = DenseTensor::new(vec![3, 4, 5], (0..60).map(|_| rng.gen::<f64>()).collect()).unwrap();
        assert_eq!(mode_k_product(&x, 1, &Mat::identity(4)).unwrap(), x);
        let m = Mat::from_fn(2, 4, |_, _| rng.gen::<f64>());
        let y = mode_k_product(&x, 1, &m).unwrap();
        for a in 0..3 {
            for j in 0..2 {
                for c in 0..5 {
                    let s: f64 = (0..4).map(|i| m.get(j, i) * x.get(&[a, i, c])).sum();
                    assert!((y.get(&[a, j, c]) - s).abs() < 1e-14);
                }
            }
        }
        let mut e = vec![0.0; 5];
        e[3] = 1.0;
        let z = mode_k_vec(&x, 2, &e).unwrap();
        assert_eq!(z.shape, vec![3, 4]);
        assert_eq!(z.get(&[1, 2]), x.get(&[1, 2, 3]));
        assert!(mode_k_product(&x, 0, &m).is_err());
    }

    #[test]
    fn cross_separable() {
        let a: Vec<f64> = (0..6).map(|i| 1.0 + i as f64).collect();
        let o = FnOracle { shape: vec![6, 7, 5], f: |idx: &[usize]| a[idx[0]] * (idx[1] as f64 - 2.5) * libm::exp(idx[2] as f64) };
        let r = tt_cross(&o, &CrossOptions::new(1e-10, 20, 3)).unwrap();
        assert_eq!(r.tt.ranks(), vec![1, 1, 1, 1]);
        let full = r.tt.full().unwrap();
        let want = DenseTensor::new(vec![6, 7, 5], {
            let mut v = Vec::new();
            for k in 0..5 {
                for j in 0..7 {
                    for i in 0..6 {
                        v.push((o.f)(&[i, j, k]));
                    }
                }
            }
            v
        })
        .unwrap();
        assert!(max_rel(&full, &want) < 1e-13);
    }

    #[test]
    fn cross_recovers_random_tt() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let t = TtTensor::random(&[5, 6, 4, 7], &[1, 3, 2, 3, 1], &mut rng).unwrap();
        let r = tt_cross(&t, &CrossOptions::new(1e-10, 30, 5)).unwrap();
        let ranks = r.tt.ranks();
        assert!(ranks[1] <= 3 && ranks[2] <= 2 && ranks[3] <= 3, "{ranks:?}");
        assert!(max_rel(&r.tt.full().unwrap(), &t.full().unwrap()) < 1e-9);
        assert!(r.converged);
    }

    #[test]
    fn cross_eval_budget() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t = TtTensor::random(&[10, 10, 10, 10, 10], &[1, 3, 3, 3, 3, 1], &mut rng).unwrap();
        let r = tt_cross(&t, &CrossOptions::new(1e-10, 30, 7)).unwrap();
        let rr = r.tt.max_rank() as u64;
        let bound = 4 * (rr * 20 + rr * rr * 30);
        assert!(r.evals <= bound, "{} > {bound}", r.evals);
    }

    #[test]
    fn cross_smooth_function() {
        let o = FnOracle {
            shape: vec![8, 8, 8, 8],
            f: |i: &[usize]| {
                let s: f64 = i.iter().map(|&v| v as f64 / 7.0).sum();
                1.0 / (1.0 + s)
            },
        };
        let r = tt_cross(&o, &CrossOptions::new(1e-8, 30, 1)).unwrap();
        let mut worst = 0.0f64;
        for a in 0..8 {
            for b in 0..8 {
                for c in 0..8 {
                    for d in 0..8 {
                        let idx = [a, b, c, d];
                        worst = worst.max((r.tt.entry(&idx).unwrap() - (o.f)(&idx)).abs());
                    }
                }
            }
        }
        assert!(worst < 1e-7, "{worst}");
    }

    #[test]
    fn rounding_removes_padding() {
        let a = [1.0, 2.0, -1.0];
        let mut c0 = TtCore::zeros(1, 3, 3);
        let mut c1 = TtCore::zeros(3, 3, 3);
        let mut c2 = TtCore::zeros(3, 3, 1);
        for i in 0..3 {
            c0.data[0 + 1 * (i + 3 * 0)] = a[i];
            c1.data[0 + 3 * (i + 3 * 0)] = a[i];
            c2.data[0 + 3 * i] = a[i];
        }
        let t = TtTensor::new(vec![c0, c1, c2]).unwrap();
        let r = tt_rounding(&t, 1e-12);
        assert_eq!(r.ranks(), vec![1, 1, 1, 1]);
        assert!(max_rel(&r.full().unwrap(), &t.full().unwrap()) < 1e-14);
    }

    #[test]
    fn rounding_minimal_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let t = TtTensor::random(&[4, 5, 6], &[1, 3, 4, 1], &mut rng).unwrap();
        let r = tt_rounding(&t, 1e-10);
        assert_eq!(r.ranks(), t.ranks());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn rounding_error_and_idempotence(
            q in 2usize..5,
            seed in 0u64..10_000,
            eps in prop_oneof![Just(1e-2), Just(1e-4), Just(1e-8)],
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let modes: Vec<usize> = (0..q).map(|_| rng.gen_range(2..6)).collect();
            let mut ranks = vec![1];
            for _ in 1..q { ranks.push(rng.gen_range(1..5)); }
            ranks.push(1);
            let t = TtTensor::random(&modes, &ranks, &mut rng).unwrap();
            let r = tt_rounding(&t, eps);
            let f = t.full().unwrap();
            let g = r.full().unwrap();
            let diff: Vec<f64> = f.data.iter().zip(&g.data).map(|(a, b)| a - b).collect();
            prop_assert!(crate::linalg::norm2(&diff) <= eps * f.frobenius() * (1.0 + 1e-10));
            for (a, b) in r.ranks().iter().zip(t.ranks()) {
                prop_assert!(*a <= b.max(1));
            }
            let r2 = tt_rounding(&r, eps);
            prop_assert_eq!(r2.ranks(), r.ranks());
            let g2 = r2.full().unwrap();
            let d2 = g.data.iter().zip(&g2.data).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
            prop_assert!(d2 <= 1e-14 * g.max_abs().max(1.0));
        }
    }
}
