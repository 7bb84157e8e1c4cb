//! Parametric far field: the coupling tensor of an admissible block,
//! its TT compression, the point-space factors S and T, and the online
//! contraction of the parameter cores.
//!
//! Coupling tensor modes are ordered (sigma dims, theta dims, tau dims).
//! Entries only depend on the translation key of the block, so blocks that
//! share a key share one TT.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::chebyshev::{cheb_grid, ChebGrid1D, ClusterBasisFactors};
use crate::error::{check_len, Error, Result};
use crate::geometry::{Block, ClusterTree};
use crate::kernels::{CountedKernel, EvalCounter, KernelSpec};
use crate::linalg::Mat;
use crate::par;
use crate::tt::{tt_cross, CrossOptions, EntryOracle, TtCore, TtTensor};

/// Largest `p_s^d` for which the explicit L and R factors are formed.
pub const LR_LIMIT: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TranslationKey {
    pub level: usize,
    /// `(lo_tau - lo_sigma) / side`, per dimension.
    pub offset: Vec<i64>,
}

/// Key of a far block, or `None` when the two boxes are not the same size
/// or not aligned on a common lattice.
pub fn translation_key(tree: &ClusterTree, b: &Block) -> Option<TranslationKey> {
    let s = &tree.node(b.sigma).bbox;
    let t = &tree.node(b.tau).bbox;
    let mut offset = Vec::with_capacity(s.dim());
    for k in 0..s.dim() {
        let side = s.side(k);
        if side <= 0.0 || libm::fabs(t.side(k) - side) > 1e-12 * side {
            return None;
        }
        let q = (t.lo[k] - s.lo[k]) / side;
        let r = libm::round(q);
        if libm::fabs(q - r) > 1e-9 {
            return None;
        }
        offset.push(r as i64);
    }
    Some(TranslationKey { level: tree.node(b.sigma).level, offset })
}

/// Node geometry of one coupling tensor in the frame of the sigma box:
/// sigma nodes on `[0, side_k]`, tau nodes shifted by the box offset.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingGeometry {
    pub sigma: Vec<Vec<f64>>,
    pub tau: Vec<Vec<f64>>,
}

impl CouplingGeometry {
    /// Lattice-aligned boxes of equal size; depends on the key only.
    pub fn from_key(side: &[f64], key: &TranslationKey, p_s: usize) -> Result<Self> {
        let mut sigma = Vec::with_capacity(side.len());
        let mut tau = Vec::with_capacity(side.len());
        for (k, &h) in side.iter().enumerate() {
            let g = cheb_grid(0.0, h, p_s)?.nodes;
            let shift = key.offset[k] as f64 * h;
            tau.push(g.iter().map(|v| v + shift).collect());
            sigma.push(g);
        }
        Ok(Self { sigma, tau })
    }

    /// Arbitrary pair of boxes.
    pub fn from_boxes(tree: &ClusterTree, b: &Block, p_s: usize) -> Result<Self> {
        let s = &tree.node(b.sigma).bbox;
        let t = &tree.node(b.tau).bbox;
        let mut sigma = Vec::with_capacity(s.dim());
        let mut tau = Vec::with_capacity(s.dim());
        for k in 0..s.dim() {
            sigma.push(cheb_grid(0.0, s.side(k), p_s)?.nodes);
            let shift = t.lo[k] - s.lo[k];
            tau.push(cheb_grid(0.0, t.side(k), p_s)?.nodes.iter().map(|v| v + shift).collect());
        }
        Ok(Self { sigma, tau })
    }

    pub fn for_block(tree: &ClusterTree, b: &Block, p_s: usize) -> Result<(Self, Option<TranslationKey>)> {
        match translation_key(tree, b) {
            Some(key) => {
                let s = &tree.node(b.sigma).bbox;
                let side: Vec<f64> = (0..s.dim()).map(|k| s.side(k)).collect();
                Ok((Self::from_key(&side, &key, p_s)?, Some(key)))
            }
            None => Ok((Self::from_boxes(tree, b, p_s)?, None)),
        }
    }

    pub fn dim(&self) -> usize {
        self.sigma.len()
    }

    pub fn p(&self) -> usize {
        self.sigma.first().map_or(0, |n| n.len())
    }

    /// Distance between sigma node `i` and tau node `j` (multi-indices).
    #[inline]
    pub fn distance(&self, i: &[usize], j: &[usize]) -> f64 {
        let mut s = 0.0;
        for k in 0..self.sigma.len() {
            let diff = self.sigma[k][i[k]] - self.tau[k][j[k]];
            s += diff * diff;
        }
        libm::sqrt(s)
    }
}

/// Counted entry oracle of the coupling tensor.
pub struct CouplingOracle<'a> {
    pub geom: &'a CouplingGeometry,
    pub theta_nodes: &'a [Vec<f64>],
    pub p_s: usize,
    kernel: CountedKernel<'a>,
}

impl<'a> CouplingOracle<'a> {
    pub fn new(
        spec: &'a KernelSpec,
        geom: &'a CouplingGeometry,
        theta_nodes: &'a [Vec<f64>],
        counter: &'a EvalCounter,
    ) -> Self {
        let p_s = geom.p();
        Self { geom, theta_nodes, p_s, kernel: CountedKernel::new(spec, counter) }
    }
}

impl EntryOracle for CouplingOracle<'_> {
    fn shape(&self) -> Vec<usize> {
        let d = self.geom.dim();
        let mut s = vec![self.p_s; d];
        s.extend(self.theta_nodes.iter().map(|t| t.len()));
        s.extend(core::iter::repeat(self.p_s).take(d));
        s
    }

    fn entry(&self, idx: &[usize]) -> f64 {
        let d = self.geom.dim();
        let dt = self.theta_nodes.len();
        let mut theta = [0.0f64; 4];
        for (k, t) in self.theta_nodes.iter().enumerate() {
            theta[k] = t[idx[d + k]];
        }
        let r = self.geom.distance(&idx[..d], &idx[d + dt..]);
        self.kernel.radial(r, &theta[..dt])
    }
}

/// TT of one coupling tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct CouplingTt {
    pub tt: TtTensor,
    pub d: usize,
    pub d_theta: usize,
    pub rank_capped: bool,
    pub error_estimate: f64,
    /// Kernel evaluations spent on this tensor (sweeps plus error samples).
    pub evals: u64,
}

impl CouplingTt {
    pub fn spatial_left(&self) -> &[TtCore] {
        &self.tt.cores[..self.d]
    }

    pub fn middle(&self) -> &[TtCore] {
        &self.tt.cores[self.d..self.d + self.d_theta]
    }

    pub fn spatial_right(&self) -> &[TtCore] {
        &self.tt.cores[self.d + self.d_theta..]
    }

    /// `r_{b,d}`
    pub fn rank_left(&self) -> usize {
        self.tt.cores[self.d].r0
    }

    /// `r_{b,d+d_theta}`
    pub fn rank_right(&self) -> usize {
        self.tt.cores[self.d + self.d_theta - 1].r1
    }

    /// Stored spatial cores plus the `r_d x r_{d+d_theta}` online matrix.
    pub fn coupling_entries(&self) -> u64 {
        let spatial: usize = self.spatial_left().iter().chain(self.spatial_right()).map(|c| c.len()).sum();
        (spatial + self.rank_left() * self.rank_right()) as u64
    }
}

/// Everything needed to compress the coupling tensors of a block set.
pub struct FarFieldSetup<'a> {
    pub tree: &'a ClusterTree,
    pub spec: &'a KernelSpec,
    pub theta_grids: &'a [ChebGrid1D],
    pub p_s: usize,
    pub eps: f64,
    pub r_max: usize,
    pub seed: u64,
    pub use_cache: bool,
}

/// Compressed couplings plus the block-to-coupling map.
#[derive(Debug, Clone)]
pub struct CouplingSet {
    pub couplings: Vec<Arc<CouplingTt>>,
    pub block_coupling: Vec<usize>,
    /// Number of distinct translation keys among the blocks.
    pub unique_keys: usize,
    /// Blocks whose boxes did not fit a common lattice.
    pub unkeyed: usize,
}

pub fn compress_coupling(
    setup: &FarFieldSetup<'_>,
    geom: &CouplingGeometry,
    seed: u64,
    counter: &EvalCounter,
) -> Result<CouplingTt> {
    let theta_nodes: Vec<Vec<f64>> = setup.theta_grids.iter().map(|g| g.nodes.clone()).collect();
    let local = EvalCounter::new();
    let res = {
        let oracle = CouplingOracle::new(setup.spec, geom, &theta_nodes, &local);
        tt_cross(&oracle, &CrossOptions::new(setup.eps, setup.r_max, seed))?
    };
    let evals = local.get();
    counter.add(evals);
    Ok(CouplingTt {
        tt: res.tt,
        d: geom.dim(),
        d_theta: theta_nodes.len(),
        rank_capped: res.rank_capped,
        error_estimate: res.error_estimate,
        evals,
    })
}

/// TT-cross on every far block, once per translation key when the cache is on.
pub fn build_couplings(setup: &FarFieldSetup<'_>, far: &[Block], counter: &EvalCounter) -> Result<CouplingSet> {
    struct Job {
        key: Option<TranslationKey>,
        rep: Block,
    }
    let mut jobs: Vec<Job> = Vec::new();
    let mut block_coupling = Vec::with_capacity(far.len());
    let mut index: HashMap<TranslationKey, usize> = HashMap::new();
    let mut distinct: HashMap<TranslationKey, ()> = HashMap::new();
    let mut unkeyed = 0;
    for b in far {
        let key = translation_key(setup.tree, b);
        match key {
            Some(k) => {
                distinct.insert(k.clone(), ());
                if setup.use_cache {
                    if let Some(&j) = index.get(&k) {
                        block_coupling.push(j);
                        continue;
                    }
                    index.insert(k.clone(), jobs.len());
                }
                block_coupling.push(jobs.len());
                jobs.push(Job { key: Some(k), rep: *b });
            }
            None => {
                unkeyed += 1;
                block_coupling.push(jobs.len());
                jobs.push(Job { key: None, rep: *b });
            }
        }
    }
    let results = par::map(jobs.len(), |j| -> Result<CouplingTt> {
        let job = &jobs[j];
        let (geom, _) = CouplingGeometry::for_block(setup.tree, &job.rep, setup.p_s)?;
        let seed = match &job.key {
            Some(k) => {
                let mut parts = vec![k.level as i64];
                parts.extend_from_slice(&k.offset);
                par::seed_for(setup.seed, &parts)
            }
            None => par::seed_for(setup.seed, &[-1, job.rep.sigma as i64, job.rep.tau as i64]),
        };
        compress_coupling(setup, &geom, seed, counter)
    });
    let couplings = results.into_iter().map(|r| r.map(Arc::new)).collect::<Result<Vec<_>>>()?;
    Ok(CouplingSet { couplings, block_coupling, unique_keys: distinct.len() + unkeyed, unkeyed })
}


/// H-form far block: point-space factors plus the shared parameter cores.
#[derive(Debug, Clone)]
pub struct FarBlockH {
    pub block: Block,
    /// Index into the coupling list.
    pub coupling: usize,
    /// `n_sigma x r_d`
    pub s: Mat,
    /// `n_tau x r_{d+d_theta}`
    pub t: Mat,
}

/// `S = U_sigma L`, built factor by factor without forming either operand.
pub fn phase3_s(left: &[TtCore], u: &ClusterBasisFactors) -> Result<Mat> {
    check_len(u.factors.len(), left.len())?;
    let n = u.n();
    let mut s = u.factors[0].matmul(&left[0].unfold_right());
    for (uk, g) in u.factors.iter().zip(left).skip(1) {
        let (r, p) = (g.r0, g.m);
        check_len(r, s.cols)?;
        let mut f = Mat::zeros(n, r * p);
        for j in 0..p {
            for a in 0..r {
                let col = f.col_mut(a + r * j);
                for (row, c) in col.iter_mut().enumerate() {
                    *c = uk.get(row, j) * s.get(row, a);
                }
            }
        }
        s = f.matmul(&g.unfold_right());
    }
    Ok(s)
}

/// `T = U_tau R`, starting from the last core.
pub fn phase3_t(right: &[TtCore], u: &ClusterBasisFactors) -> Result<Mat> {
    check_len(u.factors.len(), right.len())?;
    let n = u.n();
    let d = right.len();
    let last = &right[d - 1];
    // T[n, a] = sum_j U_d[n, j] G[a, j, 0]
    let mut t = u.factors[d - 1].matmul_t(&last.unfold_left());
    for k in (0..d - 1).rev() {
        let g = &right[k];
        let (p, r1) = (g.m, g.r1);
        check_len(r1, t.cols)?;
        let uk = &u.factors[k];
        let mut f = Mat::zeros(n, p * r1);
        for b in 0..r1 {
            for j in 0..p {
                let col = f.col_mut(j + p * b);
                for (row, c) in col.iter_mut().enumerate() {
                    *c = uk.get(row, j) * t.get(row, b);
                }
            }
        }
        t = f.matmul_t(&g.unfold_left());
    }
    Ok(t)
}

/// Cardinal values of the parameter grids at theta, one vector per parameter.
pub fn parametric_vectors(spec: &KernelSpec, grids: &[ChebGrid1D], theta: &[f64]) -> Result<Vec<Vec<f64>>> {
    spec.check_theta(theta)?;
    check_len(grids.len(), theta.len())?;
    Ok(grids.iter().zip(theta).map(|(g, &t)| g.lagrange_vec(t)).collect())
}

/// `H(theta) = prod_i G_{d+i} x_2 v_i`
pub fn h_matrix(middle: &[TtCore], vs: &[Vec<f64>]) -> Result<Mat> {
    check_len(middle.len(), vs.len())?;
    if middle.is_empty() {
        return Err(Error::Input("no parameter cores".into()));
    }
    let mut h = middle[0].contract_mode2(&vs[0]);
    for (g, v) in middle.iter().zip(vs).skip(1) {
        h = h.matmul(&g.contract_mode2(v));
    }
    Ok(h)
}

/// Explicit `L` (p^d x r_d) and `R` (p^d x r_{d+d_theta}).
pub fn assemble_l_r(c: &CouplingTt) -> Result<(Mat, Mat)> {
    let pd: usize = c.spatial_left().iter().map(|g| g.m).product();
    if pd > LR_LIMIT {
        return Err(Error::TooLarge { entries: pd, limit: LR_LIMIT });
    }
    // L[(i_1..i_k), b], i_1 fastest
    let left = c.spatial_left();
    let mut l = left[0].unfold_right();
    for g in &left[1..] {
        let rows = l.rows;
        let mut next = Mat::zeros(rows * g.m, g.r1);
        for i in 0..g.m {
            let part = l.matmul(&g.slice(i));
            for b in 0..g.r1 {
                next.col_mut(b)[rows * i..rows * (i + 1)].copy_from_slice(part.col(b));
            }
        }
        l = next;
    }
    // R[(j_1..j_k), a], j_1 fastest, built from the last core backwards
    let right = c.spatial_right();
    let last = &right[right.len() - 1];
    let mut r = last.unfold_left().transpose(); // p x r_{Delta-1}
    for g in right[..right.len() - 1].iter().rev() {
        let rows = r.rows;
        let mut next = Mat::zeros(g.m * rows, g.r0);
        for jhi in 0..rows {
            for j in 0..g.m {
                for a in 0..g.r0 {
                    let mut s = 0.0;
                    for b in 0..g.r1 {
                        s += g.get(a, j, b) * r.get(jhi, b);
                    }
                    next.set(j + g.m * jhi, a, s);
                }
            }
        }
        r = next;
    }
    Ok((l, r))
}

/// `R^T x` for x of length p^d, using only the right spatial cores.
pub fn apply_right_chain(right: &[TtCore], x: &[f64]) -> Result<Vec<f64>> {
    let pd: usize = right.iter().map(|g| g.m).product();
    check_len(pd, x.len())?;
    let mut z = Mat { rows: pd, cols: 1, data: x.to_vec() };
    for g in right.iter().rev() {
        // z: (rest x (m r1)) with the current mode next to the rank index
        let rest = z.rows * z.cols / (g.m * g.r1);
        let zm = Mat { rows: rest, cols: g.m * g.r1, data: z.data };
        z = zm.matmul_t(&g.unfold_left());
    }
    Ok(z.data)
}

/// `L z` for z of length r_d, using only the left spatial cores.
pub fn apply_left_chain(left: &[TtCore], z: &[f64]) -> Result<Vec<f64>> {
    let last = left.last().ok_or_else(|| Error::Input("no spatial cores".into()))?;
    check_len(last.r1, z.len())?;
    let mut y = Mat { rows: last.r1, cols: 1, data: z.to_vec() };
    for g in left.iter().rev() {
        let cols = y.rows * y.cols / g.r1;
        let ym = Mat { rows: g.r1, cols, data: y.data };
        y = g.unfold_right().matmul(&ym);
    }
    Ok(y.data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chebyshev::{box_grids, cluster_basis_factors};
    use crate::geometry::{BlockClusterTree, Hypercube, PointSet};
    use crate::kernels::{KernelFamily, KernelSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn points(n: usize, d: usize, seed: u64) -> PointSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        PointSet::new(d, (0..n * d).map(|_| rng.gen::<f64>()).collect()).unwrap()
    }

    fn theta_grids(spec: &KernelSpec, p: usize) -> Vec<ChebGrid1D> {
        spec.theta_box.iter().map(|iv| cheb_grid(iv.lo, iv.hi, p).unwrap()).collect()
    }

    fn random_tt(modes: &[usize], rank: usize, rng: &mut ChaCha8Rng) -> TtTensor {
        let mut ranks = vec![1];
        for _ in 1..modes.len() {
            ranks.push(rank);
        }
        ranks.push(1);
        TtTensor::random(modes, &ranks, rng).unwrap()
    }

    fn coupling_of(tt: TtTensor, d: usize, d_theta: usize) -> CouplingTt {
        CouplingTt { tt, d, d_theta, rank_capped: false, error_estimate: 0.0, evals: 0 }
    }

    #[test]
    fn oracle_shape_and_entries() {
        let pts = points(256, 3, 1);
        let tree = ClusterTree::build(&pts, &Hypercube::unit(3), 2).unwrap();
        let bt = BlockClusterTree::build(&tree, libm::sqrt(3.0)).unwrap();
        let spec = KernelSpec::with_default_box(KernelFamily::Se);
        let tg = theta_grids(&spec, 5);
        let tn: Vec<Vec<f64>> = tg.iter().map(|g| g.nodes.clone()).collect();
        let b = bt.far[0];
        let (geom, key) = CouplingGeometry::for_block(&tree, &b, 4).unwrap();
        assert!(key.is_some());
        let c = EvalCounter::new();
        let o = CouplingOracle::new(&spec, &geom, &tn, &c);
        assert_eq!(o.shape(), vec![4, 4, 4, 5, 4, 4, 4]);
        let gs = box_grids(&tree.node(b.sigma).bbox, 4).unwrap();
        let gt = box_grids(&tree.node(b.tau).bbox, 4).unwrap();
        let idx = [1, 3, 0, 2, 2, 0, 3];
        let x = [gs[0].nodes[1], gs[1].nodes[3], gs[2].nodes[0]];
        let y = [gt[0].nodes[2], gt[1].nodes[0], gt[2].nodes[3]];
        let want = spec.radial(crate::kernels::distance(&x, &y), &[tn[0][2]]);
        assert!((o.entry(&idx) - want).abs() < 1e-14);
        drop(o);
        assert_eq!(c.get(), 1);
    }

    #[test]
    fn equal_keys_give_equal_entries() {
        let pts = points(512, 2, 2);
        let tree = ClusterTree::build(&pts, &Hypercube::unit(2), 3).unwrap();
        let bt = BlockClusterTree::build(&tree, libm::sqrt(2.0)).unwrap();
        let mut seen: HashMap<TranslationKey, CouplingGeometry> = HashMap::new();
        let mut matched = 0;
        for b in &bt.far {
            let (g, key) = CouplingGeometry::for_block(&tree, b, 5).unwrap();
            let key = key.unwrap();
            if let Some(prev) = seen.get(&key) {
                assert_eq!(prev, &g);
                matched += 1;
            } else {
                // the key geometry agrees with the boxes up to rounding
                let gb = CouplingGeometry::from_boxes(&tree, b, 5).unwrap();
                for k in 0..2 {
                    for (a, c) in g.tau[k].iter().zip(&gb.tau[k]) {
                        assert!((a - c).abs() < 1e-14);
                    }
                }
                seen.insert(key, g);
            }
        }
        assert!(matched > 0);
    }

    #[test]
    fn parametric_vector_properties() {
        let spec = KernelSpec::with_default_box(KernelFamily::Mn);
        let g = theta_grids(&spec, 7);
        let v = parametric_vectors(&spec, &g, &[0.6, 1.7]).unwrap();
        for vk in &v {
            assert!((vk.iter().sum::<f64>() - 1.0).abs() < 1e-13);
        }
        let node = [g[0].nodes[3], g[1].nodes[5]];
        let v = parametric_vectors(&spec, &g, &node).unwrap();
        assert_eq!(v[0][3], 1.0);
        assert_eq!(v[1][5], 1.0);
        assert!(parametric_vectors(&spec, &g, &[2.0, 1.0]).is_err());
        // two nodes, symmetric interval: midpoint weights are one half each
        let spec = KernelSpec::with_default_box(KernelFamily::Se);
        let g2 = theta_grids(&spec, 2);
        let v = parametric_vectors(&spec, &g2, &[0.625]).unwrap();
        assert!((v[0][0] - 0.5).abs() < 1e-15 && (v[0][1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn h_at_node_is_slice_and_matches_dense_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tt = random_tt(&[3, 5, 3], 4, &mut rng);
        let h = h_matrix(&tt.cores[1..2], &[vec![0.0, 0.0, 1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(h, tt.cores[1].slice(2));
        // two parameter cores against a brute-force double contraction
        let tt = random_tt(&[2, 4, 3, 2], 3, &mut rng);
        let v1: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
        let v2: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
        let h = h_matrix(&tt.cores[1..3], &[v1.clone(), v2.clone()]).unwrap();
        let (g1, g2) = (&tt.cores[1], &tt.cores[2]);
        for a in 0..g1.r0 {
            for c in 0..g2.r1 {
                let mut s = 0.0;
                for i in 0..4 {
                    for j in 0..3 {
                        for b in 0..g1.r1 {
                            s += v1[i] * v2[j] * g1.get(a, i, b) * g2.get(b, j, c);
                        }
                    }
                }
                assert!((h.get(a, c) - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn l_h_r_reproduces_tensor_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for &(d, dt) in &[(1usize, 1usize), (2, 1), (2, 2), (3, 1)] {
            let mut modes = vec![3; d];
            modes.extend(vec![4; dt]);
            modes.extend(vec![3; d]);
            let tt = random_tt(&modes, 3, &mut rng);
            let full = tt.full().unwrap();
            let c = coupling_of(tt, d, dt);
            let (l, r) = assemble_l_r(&c).unwrap();
            assert_eq!(l.cols, c.rank_left());
            assert_eq!(r.cols, c.rank_right());
            if d == 1 {
                assert_eq!(l, c.tt.cores[0].unfold_right());
            }
            let ks: Vec<usize> = (0..dt).map(|_| rng.gen_range(0..4)).collect();
            let vs: Vec<Vec<f64>> = ks
                .iter()
                .map(|&k| (0..4).map(|i| if i == k { 1.0 } else { 0.0 }).collect())
                .collect();
            let h = h_matrix(c.middle(), &vs).unwrap();
            let m = l.matmul(&h).matmul_t(&r);
            let pd = 3usize.pow(d as u32);
            for row in 0..pd {
                for col in 0..pd {
                    let mut idx = Vec::new();
                    let (mut a, mut b) = (row, col);
                    for _ in 0..d {
                        idx.push(a % 3);
                        a /= 3;
                    }
                    idx.extend(&ks);
                    for _ in 0..d {
                        idx.push(b % 3);
                        b /= 3;
                    }
                    assert!((m.get(row, col) - full.get(&idx)).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn chains_match_explicit_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for d in 1..=3 {
            let mut modes = vec![4; d];
            modes.push(5);
            modes.extend(vec![4; d]);
            let tt = random_tt(&modes, 4, &mut rng);
            let c = coupling_of(tt, d, 1);
            let (l, r) = assemble_l_r(&c).unwrap();
            let x: Vec<f64> = (0..l.rows).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let w = apply_right_chain(c.spatial_right(), &x).unwrap();
            let want = r.matvec_t(&x);
            for (a, b) in w.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
            let z: Vec<f64> = (0..l.cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let y = apply_left_chain(c.spatial_left(), &z).unwrap();
            let want = l.matvec(&z);
            for (a, b) in y.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phase3_matches_dense_products() {
        let pts = points(300, 2, 6);
        let tree = ClusterTree::build(&pts, &Hypercube::unit(2), 2).unwrap();
        let bt = BlockClusterTree::build(&tree, libm::sqrt(2.0)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tt = random_tt(&[4, 4, 6, 4, 4], 5, &mut rng);
        let c = coupling_of(tt, 2, 1);
        let (l, r) = assemble_l_r(&c).unwrap();
        let b = bt.far[0];
        let us = cluster_basis_factors(&tree, b.sigma, &pts, 4).unwrap();
        let ut = cluster_basis_factors(&tree, b.tau, &pts, 4).unwrap();
        let s = phase3_s(c.spatial_left(), &us).unwrap();
        let t = phase3_t(c.spatial_right(), &ut).unwrap();
        assert!(s.sub(&us.assemble().matmul(&l)).max_abs() < 1e-12);
        assert!(t.sub(&ut.assemble().matmul(&r)).max_abs() < 1e-12);
        // one spatial factor
        let tt1 = random_tt(&[4, 6, 4], 3, &mut rng);
        let u1 = ClusterBasisFactors { factors: vec![us.factors[0].clone()] };
        let s1 = phase3_s(&tt1.cores[..1], &u1).unwrap();
        assert!(s1.sub(&u1.factors[0].matmul(&tt1.cores[0].unfold_right())).max_abs() < 1e-14);
    }

    #[test]
    fn pttk_block_matches_kernel() {
        // SE, d = 3, one admissible block, eps 1e-5
        let pts = points(512, 3, 8);
        let tree = ClusterTree::build(&pts, &Hypercube::unit(3), 2).unwrap();
        let bt = BlockClusterTree::build(&tree, libm::sqrt(3.0)).unwrap();
        let spec = KernelSpec::with_default_box(KernelFamily::Se);
        let tg = theta_grids(&spec, 10);
        let b = *bt.far.iter().find(|b| tree.node(b.sigma).level == 2).unwrap();
        let counter = EvalCounter::new();
        let setup = FarFieldSetup {
            tree: &tree,
            spec: &spec,
            theta_grids: &tg,
            p_s: 8,
            eps: 1e-5,
            r_max: 120,
            seed: 1,
            use_cache: true,
        };
        let set = build_couplings(&setup, &[b], &counter).unwrap();
        let c = &set.couplings[0];
        let us = cluster_basis_factors(&tree, b.sigma, &pts, 8).unwrap();
        let ut = cluster_basis_factors(&tree, b.tau, &pts, 8).unwrap();
        let s = phase3_s(c.spatial_left(), &us).unwrap();
        let t = phase3_t(c.spatial_right(), &ut).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let si = &tree.node(b.sigma).indices;
        let ti = &tree.node(b.tau).indices;
        for _ in 0..5 {
            let th = [rng.gen_range(0.25..1.0)];
            let vs = parametric_vectors(&spec, &tg, &th).unwrap();
            let before = counter.get();
            let h = h_matrix(c.middle(), &vs).unwrap();
            assert_eq!(counter.get(), before);
            let approx = s.matmul(&h).matmul_t(&t);
            let exact = Mat::from_fn(si.len(), ti.len(), |i, j| {
                spec.radial(crate::kernels::distance(pts.point(si[i]), pts.point(ti[j])), &th)
            });
            assert!(approx.sub(&exact).max_abs() <= 1e-4, "{}", approx.sub(&exact).max_abs());
        }
        // offline eval budget: O(Delta p r^2) within a factor 4 per sweep pair
        let r = c.tt.max_rank();
        let bound = 4 * 6 * 7 * 10 * r * r;
        assert!(c.evals as usize <= bound + 1000, "{} > {}", c.evals, bound);
    }

    #[test]
    fn cache_is_transparent() {
        let pts = points(512, 2, 10);
        let tree = ClusterTree::build(&pts, &Hypercube::unit(2), 3).unwrap();
        let bt = BlockClusterTree::build(&tree, libm::sqrt(2.0)).unwrap();
        let spec = KernelSpec::with_default_box(KernelFamily::E);
        let tg = theta_grids(&spec, 6);
        let mk = |use_cache| FarFieldSetup {
            tree: &tree,
            spec: &spec,
            theta_grids: &tg,
            p_s: 5,
            eps: 1e-6,
            r_max: 60,
            seed: 3,
            use_cache,
        };
        let (c1, c2) = (EvalCounter::new(), EvalCounter::new());
        let a = build_couplings(&mk(true), &bt.far, &c1).unwrap();
        let b = build_couplings(&mk(false), &bt.far, &c2).unwrap();
        assert_eq!(a.unique_keys, b.unique_keys);
        assert_eq!(a.couplings.len(), a.unique_keys);
        assert_eq!(b.couplings.len(), bt.far.len());
        for i in 0..bt.far.len() {
            assert_eq!(a.couplings[a.block_coupling[i]].tt, b.couplings[b.block_coupling[i]].tt);
        }
        assert!(c2.get() > c1.get());
    }
}
