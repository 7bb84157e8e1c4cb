//! Parametric H and H2 matrices: offline assembly, online instantiation
//! and matrix-vector products.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::chebyshev::{cheb_grid, cluster_basis_factors, fast_kron, transfer_factors, ChebGrid1D, ClusterBasisFactors};
use crate::error::{check_len, Error, Result};
use crate::farfield::{
    apply_left_chain, apply_right_chain, assemble_l_r, build_couplings, h_matrix, parametric_vectors,
    phase3_s, phase3_t, CouplingSet, FarBlockH, FarFieldSetup,
};
use crate::geometry::{Block, BlockClusterTree, ClusterTree, Hypercube, PointSet};
use crate::kernels::{EvalCounter, KernelSpec};
use crate::linalg::Mat;
use crate::metrics::{mean_rank, MatrixMetrics};
use crate::nearfield::{direct_block, nearfield_offline, nearfield_online, NearBlockTt, NearSetup};
use crate::par;
use crate::tt::FULL_LIMIT;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NearMode {
    /// TT compression offline, contraction online.
    Tt,
    /// Kernel evaluated online.
    Direct,
}

impl NearMode {
    pub fn id(self) -> &'static str {
        match self {
            NearMode::Tt => "tt",
            NearMode::Direct => "direct",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s {
            "tt" => Ok(NearMode::Tt),
            "direct" => Ok(NearMode::Direct),
            _ => Err(Error::Input(format!("unknown near mode '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BuildConfig {
    pub l_max: usize,
    pub p_s: usize,
    pub p_theta: usize,
    pub eps: f64,
    pub eta: f64,
    pub seed: u64,
    pub near_mode: NearMode,
    pub use_cache: bool,
    pub r_max_far: usize,
    pub r_max_near: usize,
    /// Defaults to the unit cube.
    pub root_box: Option<Hypercube>,
}

impl BuildConfig {
    pub fn new(d: usize) -> Self {
        Self {
            l_max: 2,
            p_s: 15,
            p_theta: 27,
            eps: 1e-5,
            eta: libm::sqrt(d as f64),
            seed: 7,
            near_mode: NearMode::Tt,
            use_cache: true,
            r_max_far: 300,
            r_max_near: 150,
            root_box: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |f: &str| Err(Error::Input(format!("config field '{f}' must be positive")));
        if self.p_s == 0 {
            return bad("p_s");
        }
        if self.p_theta == 0 {
            return bad("p_theta");
        }
        if !(self.eps > 0.0) {
            return bad("eps");
        }
        if !(self.eta > 0.0) {
            return bad("eta");
        }
        if self.r_max_far == 0 {
            return bad("r_max_far");
        }
        if self.r_max_near == 0 {
            return bad("r_max_near");
        }
        Ok(())
    }
}

/// Points, trees and parameter grids shared by every format.
#[derive(Debug, Clone)]
pub struct Structure {
    pub points: PointSet,
    pub spec: KernelSpec,
    pub config: BuildConfig,
    pub tree: ClusterTree,
    pub blocks: BlockClusterTree,
    pub theta_grids: Vec<ChebGrid1D>,
}

impl Structure {
    pub fn new(points: PointSet, spec: KernelSpec, config: BuildConfig) -> Result<Self> {
        config.validate()?;
        let d = points.dim();
        let root = config.root_box.clone().unwrap_or_else(|| Hypercube::unit(d));
        let tree = ClusterTree::build(&points, &root, config.l_max)?;
        let blocks = BlockClusterTree::build(&tree, config.eta)?;
        let theta_grids = spec
            .theta_box
            .iter()
            .map(|iv| cheb_grid(iv.lo, iv.hi, config.p_theta))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { points, spec, config, tree, blocks, theta_grids })
    }

    pub fn n(&self) -> usize {
        self.points.len()
    }

    pub fn theta_nodes(&self) -> Vec<Vec<f64>> {
        self.theta_grids.iter().map(|g| g.nodes.clone()).collect()
    }

    pub fn parametric_vectors(&self, theta: &[f64]) -> Result<Vec<Vec<f64>>> {
        parametric_vectors(&self.spec, &self.theta_grids, theta)
    }

    fn far_setup(&self) -> FarFieldSetup<'_> {
        FarFieldSetup {
            tree: &self.tree,
            spec: &self.spec,
            theta_grids: &self.theta_grids,
            p_s: self.config.p_s,
            eps: self.config.eps,
            r_max: self.config.r_max_far,
            seed: self.config.seed,
            use_cache: self.config.use_cache,
        }
    }

    pub fn near_sizes(&self) -> u64 {
        self.blocks
            .near
            .iter()
            .map(|b| (self.tree.node(b.sigma).size() * self.tree.node(b.tau).size()) as u64)
            .sum()
    }

    pub(crate) fn rows(&self, b: &Block) -> (&[usize], &[usize]) {
        (&self.tree.node(b.sigma).indices, &self.tree.node(b.tau).indices)
    }

    /// Exact kernel matrix; only for small n.
    pub fn dense_kernel(&self, theta: &[f64], counter: &EvalCounter) -> Result<Mat> {
        self.spec.check_theta(theta)?;
        let n = self.n();
        if n * n > FULL_LIMIT {
            return Err(Error::TooLarge { entries: n * n, limit: FULL_LIMIT });
        }
        let all: Vec<usize> = (0..n).collect();
        Ok(direct_block(&self.spec, &self.points, &all, &all, theta, counter))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum NearField {
    Tt(Vec<NearBlockTt>),
    Direct,
}

impl NearField {
    fn build(st: &Structure, counter: &EvalCounter) -> Result<Self> {
        match st.config.near_mode {
            NearMode::Direct => Ok(NearField::Direct),
            NearMode::Tt => {
                let tn = st.theta_nodes();
                let setup = NearSetup {
                    points: &st.points,
                    tree: &st.tree,
                    spec: &st.spec,
                    theta_nodes: &tn,
                    eps: st.config.eps,
                    r_max: st.config.r_max_near,
                };
                let near = &st.blocks.near;
                let res = par::map(near.len(), |i| {
                    let b = &near[i];
                    let seed = par::seed_for(st.config.seed, &[-2, b.sigma as i64, b.tau as i64]);
                    nearfield_offline(&setup, b, seed, counter)
                });
                Ok(NearField::Tt(res.into_iter().collect::<Result<Vec<_>>>()?))
            }
        }
    }

    /// Dense near blocks at theta. Only the direct mode evaluates the kernel.
    fn instantiate(&self, st: &Structure, theta: &[f64], vs: &[Vec<f64>], counter: &EvalCounter) -> Result<Vec<Mat>> {
        match self {
            NearField::Tt(blocks) => {
                par::map(blocks.len(), |i| nearfield_online(&blocks[i], vs)).into_iter().collect()
            }
            NearField::Direct => {
                let near = &st.blocks.near;
                Ok(par::map(near.len(), |i| {
                    let (r, c) = st.rows(&near[i]);
                    direct_block(&st.spec, &st.points, r, c, theta, counter)
                }))
            }
        }
    }

    fn storage(&self) -> u64 {
        match self {
            NearField::Tt(blocks) => blocks.iter().map(|b| b.tt.storage() as u64).sum(),
            NearField::Direct => 0,
        }
    }

    fn capped(&self) -> usize {
        match self {
            NearField::Tt(blocks) => blocks.iter().filter(|b| b.rank_capped).count(),
            NearField::Direct => 0,
        }
    }

    fn max_error(&self) -> f64 {
        match self {
            NearField::Tt(blocks) => blocks.iter().fold(0.0, |m, b| m.max(b.error_estimate)),
            NearField::Direct => 0.0,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct OfflineStats {
    pub far_evals: u64,
    pub near_evals: u64,
    pub unique_keys: usize,
    pub couplings: usize,
    pub far_rank_capped: usize,
    pub near_rank_capped: usize,
    /// Largest sampled TT-cross error over the far and near tensors.
    pub max_far_error: f64,
    pub max_near_error: f64,
}

fn offline_common(st: &Structure, counter: &EvalCounter) -> Result<(CouplingSet, NearField, OfflineStats)> {
    let before = counter.get();
    let couplings = build_couplings(&st.far_setup(), &st.blocks.far, counter)?;
    let mid = counter.get();
    let near = NearField::build(st, counter)?;
    let after = counter.get();
    let stats = OfflineStats {
        far_evals: mid - before,
        near_evals: after - mid,
        unique_keys: couplings.unique_keys,
        couplings: couplings.couplings.len(),
        far_rank_capped: couplings.couplings.iter().filter(|c| c.rank_capped).count(),
        near_rank_capped: near.capped(),
        max_far_error: couplings.couplings.iter().fold(0.0, |m, c| m.max(c.error_estimate)),
        max_near_error: near.max_error(),
    };
    Ok((couplings, near, stats))
}

fn accumulate(y: &mut [f64], idx: &[usize], v: &[f64]) {
    for (&i, &vi) in idx.iter().zip(v) {
        y[i] += vi;
    }
}

fn near_apply(st: &Structure, near: &[Mat], x: &[f64], y: &mut [f64]) {
    let blocks = &st.blocks.near;
    let parts = par::map(blocks.len(), |i| {
        let (_, c) = st.rows(&blocks[i]);
        near[i].matvec(&gather(x, c))
    });
    for (b, v) in blocks.iter().zip(&parts) {
        accumulate(y, st.rows(b).0, v);
    }
}

fn gather(x: &[f64], idx: &[usize]) -> Vec<f64> {
    idx.iter().map(|&i| x[i]).collect()
}

fn fill_dense(out: &mut Mat, rows: &[usize], cols: &[usize], blk: &Mat) {
    for (jj, &j) in cols.iter().enumerate() {
        for (ii, &i) in rows.iter().enumerate() {
            out.set(i, j, blk.get(ii, jj));
        }
    }
}

/// Matrix-free operator interface used by the harness.
pub trait LinearOperator {
    fn size(&self) -> usize;
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>>;
}

// ---------------------------------------------------------------- H format

#[derive(Debug, Clone)]
pub struct ParametricHMatrix {
    pub structure: Structure,
    pub couplings: CouplingSet,
    pub far: Vec<FarBlockH>,
    pub near: NearField,
    pub stats: OfflineStats,
}

impl ParametricHMatrix {
    pub fn build(points: PointSet, spec: KernelSpec, config: BuildConfig, counter: &EvalCounter) -> Result<Self> {
        let st = Structure::new(points, spec, config)?;
        let (couplings, near, stats) = offline_common(&st, counter)?;
        let blocks = &st.blocks.far;
        let far = par::map(blocks.len(), |i| -> Result<FarBlockH> {
            let b = blocks[i];
            let ci = couplings.block_coupling[i];
            let c = &couplings.couplings[ci];
            let us = cluster_basis_factors(&st.tree, b.sigma, &st.points, st.config.p_s)?;
            let ut = cluster_basis_factors(&st.tree, b.tau, &st.points, st.config.p_s)?;
            Ok(FarBlockH {
                block: b,
                coupling: ci,
                s: phase3_s(c.spatial_left(), &us)?,
                t: phase3_t(c.spatial_right(), &ut)?,
            })
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { structure: st, couplings, far, near, stats })
    }

    /// `H_b(theta)` per coupling tensor.
    pub fn online_far(&self, vs: &[Vec<f64>]) -> Result<Vec<Mat>> {
        let cs = &self.couplings.couplings;
        par::map(cs.len(), |i| h_matrix(cs[i].middle(), vs)).into_iter().collect()
    }

    pub fn online_near(&self, theta: &[f64], vs: &[Vec<f64>], counter: &EvalCounter) -> Result<Vec<Mat>> {
        self.near.instantiate(&self.structure, theta, vs, counter)
    }

    /// Zero kernel evaluations unless the near field runs in direct mode.
    pub fn instantiate(&self, theta: &[f64], counter: &EvalCounter) -> Result<InstantiatedHMatrix<'_>> {
        let vs = self.structure.parametric_vectors(theta)?;
        let h = self.online_far(&vs)?;
        let near = self.online_near(theta, &vs, counter)?;
        Ok(InstantiatedHMatrix { param: self, theta: theta.to_vec(), h, near })
    }

    pub fn metrics(&self) -> MatrixMetrics {
        let st = &self.structure;
        let cs = &self.couplings.couplings;
        let mut ff = 0u64;
        let mut storage = self.near.storage();
        for fb in &self.far {
            let c = &cs[fb.coupling];
            ff += (fb.s.data.len() + fb.t.data.len() + c.rank_left() * c.rank_right()) as u64;
            storage += (fb.s.data.len() + fb.t.data.len()) as u64;
        }
        storage += cs.iter().map(|c| c.middle().iter().map(|g| g.len() as u64).sum::<u64>()).sum::<u64>();
        MatrixMetrics {
            n: st.n(),
            storage_entries: storage,
            nf_entries: st.near_sizes(),
            ff_entries: ff,
            coupling_entries: None,
            rank: mean_rank(self.far.iter().map(|fb| {
                let c = &cs[fb.coupling];
                c.rank_left().max(c.rank_right())
            })),
            c_sp: st.blocks.c_sp,
            m_a: self.couplings.unique_keys,
            n_far: st.blocks.far.len(),
            n_near: st.blocks.near.len(),
        }
    }
}

pub struct InstantiatedHMatrix<'a> {
    pub param: &'a ParametricHMatrix,
    pub theta: Vec<f64>,
    /// One matrix per coupling tensor.
    pub h: Vec<Mat>,
    pub near: Vec<Mat>,
}

impl InstantiatedHMatrix<'_> {
    pub fn far_block_dense(&self, i: usize) -> Mat {
        let fb = &self.param.far[i];
        fb.s.matmul(&self.h[fb.coupling]).matmul_t(&fb.t)
    }

    pub fn to_dense(&self) -> Result<Mat> {
        let st = &self.param.structure;
        let n = st.n();
        if n * n > FULL_LIMIT {
            return Err(Error::TooLarge { entries: n * n, limit: FULL_LIMIT });
        }
        let mut out = Mat::zeros(n, n);
        for (i, fb) in self.param.far.iter().enumerate() {
            let (r, c) = st.rows(&fb.block);
            fill_dense(&mut out, r, c, &self.far_block_dense(i));
        }
        for (b, m) in st.blocks.near.iter().zip(&self.near) {
            let (r, c) = st.rows(b);
            fill_dense(&mut out, r, c, m);
        }
        Ok(out)
    }

    /// `y = K(theta) x`, far part as `S (H (T^T x))`.
    pub fn mvm(&self, x: &[f64]) -> Result<Vec<f64>> {
        let st = &self.param.structure;
        check_len(st.n(), x.len())?;
        let mut y = vec![0.0; st.n()];
        let far = &self.param.far;
        let parts = par::map(far.len(), |i| {
            let fb = &far[i];
            let (_, c) = st.rows(&fb.block);
            let w = fb.t.matvec_t(&gather(x, c));
            fb.s.matvec(&self.h[fb.coupling].matvec(&w))
        });
        for (fb, v) in far.iter().zip(&parts) {
            accumulate(&mut y, st.rows(&fb.block).0, v);
        }
        near_apply(st, &self.near, x, &mut y);
        Ok(y)
    }
}

impl LinearOperator for InstantiatedHMatrix<'_> {
    fn size(&self) -> usize {
        self.param.structure.n()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mvm(x)
    }
}

// --------------------------------------------------------------- H2 format

/// Leaf bases and transfer factors of a uniform tree.
#[derive(Debug, Clone, PartialEq)]
pub struct H2Basis {
    pub p_s: usize,
    /// Per node; `Some` for non-empty leaves.
    pub leaf: Vec<Option<ClusterBasisFactors>>,
    /// Per node; `Some` for non-empty non-root nodes. Factor k maps child
    /// nodes to parent cardinal functions in dimension k.
    pub transfer: Vec<Option<Vec<Mat>>>,
}

impl H2Basis {
    pub fn build(st: &Structure) -> Result<Self> {
        let tree = &st.tree;
        let p = st.config.p_s;
        let leaf = par::map(tree.len(), |i| {
            let nd = tree.node(i);
            if nd.is_leaf() && nd.size() > 0 {
                cluster_basis_factors(tree, i, &st.points, p).map(Some)
            } else {
                Ok(None)
            }
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        let transfer = par::map(tree.len(), |i| {
            let nd = tree.node(i);
            match nd.parent {
                Some(pa) if nd.size() > 0 => transfer_factors(&tree.node(pa).bbox, &nd.bbox, p).map(Some),
                _ => Ok(None),
            }
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Ok(Self { p_s: p, leaf, transfer })
    }

    pub fn storage(&self) -> u64 {
        let l: usize = self.leaf.iter().flatten().map(|f| f.factors.iter().map(|m| m.data.len()).sum::<usize>()).sum();
        let t: usize = self.transfer.iter().flatten().map(|f| f.iter().map(|m| m.data.len()).sum::<usize>()).sum();
        (l + t) as u64
    }

    /// `U_sigma^T x_sigma` for every non-empty node, leaves first then upward.
    pub fn forward(&self, tree: &ClusterTree, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut xh: Vec<Vec<f64>> = vec![Vec::new(); tree.len()];
        for i in (0..tree.len()).rev() {
            let nd = tree.node(i);
            if nd.size() == 0 {
                continue;
            }
            if let Some(u) = &self.leaf[i] {
                let xs: Vec<f64> = nd.indices.iter().map(|&k| x[k]).collect();
                xh[i] = u.apply_t(&xs);
            } else {
                let mut acc = vec![0.0; self.p_s.pow(tree.d as u32)];
                for &c in &nd.children {
                    if let Some(e) = &self.transfer[c] {
                        let v = fast_kron(e, &xh[c])?;
                        for (a, b) in acc.iter_mut().zip(&v) {
                            *a += b;
                        }
                    }
                }
                xh[i] = acc;
            }
        }
        Ok(xh)
    }

    /// Pushes node coefficients down the tree and adds `U_sigma z_sigma` into y.
    pub fn backward(&self, tree: &ClusterTree, mut zh: Vec<Option<Vec<f64>>>, y: &mut [f64]) -> Result<()> {
        for i in 0..tree.len() {
            let nd = tree.node(i);
            if nd.size() == 0 {
                continue;
            }
            if let (Some(pa), Some(e)) = (nd.parent, &self.transfer[i]) {
                if let Some(zp) = zh[pa].clone() {
                    let et: Vec<Mat> = e.iter().map(|m| m.transpose()).collect();
                    let v = fast_kron(&et, &zp)?;
                    match &mut zh[i] {
                        Some(z) => {
                            for (a, b) in z.iter_mut().zip(&v) {
                                *a += b;
                            }
                        }
                        slot => *slot = Some(v),
                    }
                }
            }
            if let (Some(u), Some(z)) = (&self.leaf[i], &zh[i]) {
                let mut ys = vec![0.0; nd.size()];
                u.apply_acc(z, &mut ys);
                accumulate(y, &nd.indices, &ys);
            }
        }
        Ok(())
    }
}

/// Shared H2 product: forward pass, per-block coupling action, backward
/// pass, dense near blocks.
pub fn h2_apply<F>(st: &Structure, basis: &H2Basis, near: &[Mat], x: &[f64], mult: F) -> Result<Vec<f64>>
where
    F: Fn(usize, &[f64]) -> Result<Vec<f64>> + Sync + Send,
{
    check_len(st.n(), x.len())?;
    let tree = &st.tree;
    let xh = basis.forward(tree, x)?;
    let far = &st.blocks.far;
    let parts = par::map(far.len(), |i| mult(i, &xh[far[i].tau]));
    let mut zh: Vec<Option<Vec<f64>>> = vec![None; tree.len()];
    for (b, v) in far.iter().zip(parts) {
        let v = v?;
        match &mut zh[b.sigma] {
            Some(z) => {
                for (a, c) in z.iter_mut().zip(&v) {
                    *a += c;
                }
            }
            slot => *slot = Some(v),
        }
    }
    let mut y = vec![0.0; st.n()];
    basis.backward(tree, zh, &mut y)?;
    near_apply(st, near, x, &mut y);
    Ok(y)
}

#[derive(Debug, Clone)]
pub struct ParametricH2Matrix {
    pub structure: Structure,
    pub basis: H2Basis,
    pub couplings: CouplingSet,
    pub near: NearField,
    pub stats: OfflineStats,
}

impl ParametricH2Matrix {
    pub fn build(points: PointSet, spec: KernelSpec, config: BuildConfig, counter: &EvalCounter) -> Result<Self> {
        let st = Structure::new(points, spec, config)?;
        let basis = H2Basis::build(&st)?;
        let (couplings, near, stats) = offline_common(&st, counter)?;
        Ok(Self { structure: st, basis, couplings, near, stats })
    }

    pub fn online_far(&self, vs: &[Vec<f64>]) -> Result<Vec<Mat>> {
        let cs = &self.couplings.couplings;
        par::map(cs.len(), |i| h_matrix(cs[i].middle(), vs)).into_iter().collect()
    }

    pub fn online_near(&self, theta: &[f64], vs: &[Vec<f64>], counter: &EvalCounter) -> Result<Vec<Mat>> {
        self.near.instantiate(&self.structure, theta, vs, counter)
    }

    pub fn instantiate(&self, theta: &[f64], counter: &EvalCounter) -> Result<InstantiatedH2Matrix<'_>> {
        let vs = self.structure.parametric_vectors(theta)?;
        let h = self.online_far(&vs)?;
        let near = self.online_near(theta, &vs, counter)?;
        Ok(InstantiatedH2Matrix { param: self, theta: theta.to_vec(), h, near })
    }

    pub fn metrics(&self) -> MatrixMetrics {
        let st = &self.structure;
        let cs = &self.couplings.couplings;
        let coupling: u64 = self.couplings.block_coupling.iter().map(|&c| cs[c].coupling_entries()).sum();
        let basis = self.basis.storage();
        let tt: u64 = cs.iter().map(|c| c.tt.storage() as u64).sum();
        MatrixMetrics {
            n: st.n(),
            storage_entries: basis + tt + self.near.storage(),
            nf_entries: st.near_sizes(),
            ff_entries: basis + coupling,
            coupling_entries: Some(coupling),
            rank: mean_rank(self.couplings.block_coupling.iter().map(|&c| cs[c].rank_left().max(cs[c].rank_right()))),
            c_sp: st.blocks.c_sp,
            m_a: self.couplings.unique_keys,
            n_far: st.blocks.far.len(),
            n_near: st.blocks.near.len(),
        }
    }
}

pub struct InstantiatedH2Matrix<'a> {
    pub param: &'a ParametricH2Matrix,
    pub theta: Vec<f64>,
    pub h: Vec<Mat>,
    pub near: Vec<Mat>,
}

impl InstantiatedH2Matrix<'_> {
    /// Multiplication stage of far block i: `L (H (R^T xh))` through the TT cores.
    pub fn coupling_apply(&self, i: usize, xh: &[f64]) -> Result<Vec<f64>> {
        let ci = self.param.couplings.block_coupling[i];
        let c = &self.param.couplings.couplings[ci];
        let w = apply_right_chain(c.spatial_right(), xh)?;
        let z = self.h[ci].matvec(&w);
        apply_left_chain(c.spatial_left(), &z)
    }

    /// Explicit `L H R^T` of far block i.
    pub fn coupling_dense(&self, i: usize) -> Result<Mat> {
        let ci = self.param.couplings.block_coupling[i];
        let (l, r) = assemble_l_r(&self.param.couplings.couplings[ci])?;
        Ok(l.matmul(&self.h[ci]).matmul_t(&r))
    }

    pub fn to_dense(&self) -> Result<Mat> {
        let st = &self.param.structure;
        let n = st.n();
        if n * n > FULL_LIMIT {
            return Err(Error::TooLarge { entries: n * n, limit: FULL_LIMIT });
        }
        let mut out = Mat::zeros(n, n);
        for (i, b) in st.blocks.far.iter().enumerate() {
            let us = cluster_basis_factors(&st.tree, b.sigma, &st.points, st.config.p_s)?.assemble();
            let ut = cluster_basis_factors(&st.tree, b.tau, &st.points, st.config.p_s)?.assemble();
            let blk = us.matmul(&self.coupling_dense(i)?).matmul_t(&ut);
            let (r, c) = st.rows(b);
            fill_dense(&mut out, r, c, &blk);
        }
        for (b, m) in st.blocks.near.iter().zip(&self.near) {
            let (r, c) = st.rows(b);
            fill_dense(&mut out, r, c, m);
        }
        Ok(out)
    }

    pub fn mvm(&self, x: &[f64]) -> Result<Vec<f64>> {
        h2_apply(&self.param.structure, &self.param.basis, &self.near, x, |i, xh| self.coupling_apply(i, xh))
    }
}

impl LinearOperator for InstantiatedH2Matrix<'_> {
    fn size(&self) -> usize {
        self.param.structure.n()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mvm(x)
    }
}
