//! Non-parametric baselines at a fixed parameter: H-ACA (ACA on every far
//! block, dense near blocks) and H2-HCA (ACA on the interpolation-node
//! interaction matrix of each translation class, nested Chebyshev basis).

use alloc::vec;
use alloc::vec::Vec;

use hashbrown::HashMap;

use crate::aca::{aca_partial, LowRankFactors, MatrixOracle};
use crate::error::{check_len, Result};
use crate::farfield::{translation_key, CouplingGeometry, TranslationKey};
use crate::geometry::PointSet;
use crate::kernels::{CountedKernel, EvalCounter, KernelSpec};
use crate::linalg::Mat;
use crate::metrics::{mean_rank, MatrixMetrics};
use crate::nearfield::direct_block;
use crate::par;
use crate::phmatrix::{h2_apply, BuildConfig, H2Basis, LinearOperator, Structure};

/// Rows and columns of a kernel block, evaluated on demand.
pub struct KernelBlockOracle<'a> {
    points: &'a PointSet,
    rows: &'a [usize],
    cols: &'a [usize],
    theta: &'a [f64],
    kernel: CountedKernel<'a>,
}

impl<'a> KernelBlockOracle<'a> {
    pub fn new(
        spec: &'a KernelSpec,
        points: &'a PointSet,
        rows: &'a [usize],
        cols: &'a [usize],
        theta: &'a [f64],
        counter: &'a EvalCounter,
    ) -> Self {
        Self { points, rows, cols, theta, kernel: CountedKernel::new(spec, counter) }
    }
}

impl MatrixOracle for KernelBlockOracle<'_> {
    fn nrows(&self) -> usize {
        self.rows.len()
    }
    fn ncols(&self) -> usize {
        self.cols.len()
    }
    fn row(&mut self, i: usize, out: &mut [f64]) {
        let x = self.points.point(self.rows[i]);
        for (o, &j) in out.iter_mut().zip(self.cols) {
            *o = self.kernel.eval(x, self.points.point(j), self.theta);
        }
    }
    fn col(&mut self, j: usize, out: &mut [f64]) {
        let y = self.points.point(self.cols[j]);
        for (o, &i) in out.iter_mut().zip(self.rows) {
            *o = self.kernel.eval(self.points.point(i), y, self.theta);
        }
    }
}

/// Kernel at the Chebyshev node pairs of one translation class,
/// multi-indices little-endian.
pub struct NodeOracle<'a> {
    geom: &'a CouplingGeometry,
    theta: &'a [f64],
    kernel: CountedKernel<'a>,
    size: usize,
}

impl<'a> NodeOracle<'a> {
    pub fn new(spec: &'a KernelSpec, geom: &'a CouplingGeometry, theta: &'a [f64], counter: &'a EvalCounter) -> Self {
        let size = geom.p().pow(geom.dim() as u32);
        Self { geom, theta, kernel: CountedKernel::new(spec, counter), size }
    }

    fn split(&self, mut k: usize, out: &mut [usize; 8]) {
        let p = self.geom.p();
        for o in out.iter_mut().take(self.geom.dim()) {
            *o = k % p;
            k /= p;
        }
    }
}

impl MatrixOracle for NodeOracle<'_> {
    fn nrows(&self) -> usize {
        self.size
    }
    fn ncols(&self) -> usize {
        self.size
    }
    fn row(&mut self, i: usize, out: &mut [f64]) {
        let d = self.geom.dim();
        let (mut a, mut b) = ([0usize; 8], [0usize; 8]);
        self.split(i, &mut a);
        for (j, o) in out.iter_mut().enumerate() {
            self.split(j, &mut b);
            *o = self.kernel.radial(self.geom.distance(&a[..d], &b[..d]), self.theta);
        }
    }
    fn col(&mut self, j: usize, out: &mut [f64]) {
        let d = self.geom.dim();
        let (mut a, mut b) = ([0usize; 8], [0usize; 8]);
        self.split(j, &mut b);
        for (i, o) in out.iter_mut().enumerate() {
            self.split(i, &mut a);
            *o = self.kernel.radial(self.geom.distance(&a[..d], &b[..d]), self.theta);
        }
    }
}

/// Dense near blocks at theta.
pub fn dense_near_blocks(st: &Structure, theta: &[f64], counter: &EvalCounter) -> Result<Vec<Mat>> {
    st.spec.check_theta(theta)?;
    let near = &st.blocks.near;
    Ok(par::map(near.len(), |i| {
        let b = &near[i];
        let (r, c) = (&st.tree.node(b.sigma).indices, &st.tree.node(b.tau).indices);
        direct_block(&st.spec, &st.points, r, c, theta, counter)
    }))
}

fn add_into(y: &mut [f64], idx: &[usize], v: &[f64]) {
    for (&i, &vi) in idx.iter().zip(v) {
        y[i] += vi;
    }
}

fn near_apply(st: &Structure, near: &[Mat], x: &[f64], y: &mut [f64]) {
    for (b, m) in st.blocks.near.iter().zip(near) {
        let xs: Vec<f64> = st.tree.node(b.tau).indices.iter().map(|&j| x[j]).collect();
        add_into(y, &st.tree.node(b.sigma).indices, &m.matvec(&xs));
    }
}

// ------------------------------------------------------------------ H-ACA

pub struct HAca {
    pub structure: Structure,
    pub theta: Vec<f64>,
    pub far: Vec<LowRankFactors>,
    pub near: Vec<Mat>,
}

/// ACA on every far block at theta.
pub fn aca_far_blocks(st: &Structure, theta: &[f64], counter: &EvalCounter) -> Result<Vec<LowRankFactors>> {
    st.spec.check_theta(theta)?;
    let far = &st.blocks.far;
    let eps = st.config.eps;
    Ok(par::map(far.len(), |i| {
        let b = &far[i];
        let (r, c) = (&st.tree.node(b.sigma).indices, &st.tree.node(b.tau).indices);
        let mut o = KernelBlockOracle::new(&st.spec, &st.points, r, c, theta, counter);
        aca_partial(&mut o, eps, r.len().min(c.len()), 0)
    }))
}

pub fn h_aca(points: PointSet, spec: KernelSpec, theta: &[f64], config: BuildConfig, counter: &EvalCounter) -> Result<HAca> {
    let st = Structure::new(points, spec, config)?;
    let near = dense_near_blocks(&st, theta, counter)?;
    let far = aca_far_blocks(&st, theta, counter)?;
    Ok(HAca { structure: st, theta: theta.to_vec(), far, near })
}

impl HAca {
    pub fn mvm(&self, x: &[f64]) -> Result<Vec<f64>> {
        let st = &self.structure;
        check_len(st.n(), x.len())?;
        let mut y = vec![0.0; st.n()];
        for (b, f) in st.blocks.far.iter().zip(&self.far) {
            let xs: Vec<f64> = st.tree.node(b.tau).indices.iter().map(|&j| x[j]).collect();
            let w = f.v.matvec_t(&xs);
            add_into(&mut y, &st.tree.node(b.sigma).indices, &f.u.matvec(&w));
        }
        near_apply(st, &self.near, x, &mut y);
        Ok(y)
    }

    pub fn metrics(&self) -> MatrixMetrics {
        let st = &self.structure;
        let ff: u64 = self.far.iter().map(|f| f.storage() as u64).sum();
        let nf = st.near_sizes();
        MatrixMetrics {
            n: st.n(),
            storage_entries: ff + nf,
            nf_entries: nf,
            ff_entries: ff,
            coupling_entries: None,
            rank: mean_rank(self.far.iter().map(|f| f.rank())),
            c_sp: st.blocks.c_sp,
            m_a: st.blocks.far.len(),
            n_far: st.blocks.far.len(),
            n_near: st.blocks.near.len(),
        }
    }
}

impl LinearOperator for HAca {
    fn size(&self) -> usize {
        self.structure.n()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mvm(x)
    }
}

// ----------------------------------------------------------------- H2-HCA

/// Node-interaction factors `X Y^T`, one per translation class.
pub struct HcaCouplings {
    pub factors: Vec<LowRankFactors>,
    pub block_coupling: Vec<usize>,
}

pub fn hca_couplings(st: &Structure, theta: &[f64], counter: &EvalCounter) -> Result<HcaCouplings> {
    st.spec.check_theta(theta)?;
    let p = st.config.p_s;
    let mut reps = Vec::new();
    let mut index: HashMap<Option<TranslationKey>, usize> = HashMap::new();
    let mut block_coupling = Vec::with_capacity(st.blocks.far.len());
    for (i, b) in st.blocks.far.iter().enumerate() {
        let key = translation_key(&st.tree, b);
        let slot = if key.is_some() && st.config.use_cache {
            *index.entry(key).or_insert_with(|| {
                reps.push(i);
                reps.len() - 1
            })
        } else {
            reps.push(i);
            reps.len() - 1
        };
        block_coupling.push(slot);
    }
    let far = &st.blocks.far;
    let eps = st.config.eps;
    let factors = par::map(reps.len(), |k| -> Result<LowRankFactors> {
        let (geom, _) = CouplingGeometry::for_block(&st.tree, &far[reps[k]], p)?;
        let mut o = NodeOracle::new(&st.spec, &geom, theta, counter);
        let m = o.nrows();
        Ok(aca_partial(&mut o, eps, m, 0))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(HcaCouplings { factors, block_coupling })
}

pub struct H2Hca {
    pub structure: Structure,
    pub basis: H2Basis,
    pub theta: Vec<f64>,
    pub couplings: HcaCouplings,
    pub near: Vec<Mat>,
}

pub fn h2_hca(points: PointSet, spec: KernelSpec, theta: &[f64], config: BuildConfig, counter: &EvalCounter) -> Result<H2Hca> {
    let st = Structure::new(points, spec, config)?;
    let basis = H2Basis::build(&st)?;
    let near = dense_near_blocks(&st, theta, counter)?;
    let couplings = hca_couplings(&st, theta, counter)?;
    Ok(H2Hca { structure: st, basis, theta: theta.to_vec(), couplings, near })
}

impl H2Hca {
    pub fn mvm(&self, x: &[f64]) -> Result<Vec<f64>> {
        let c = &self.couplings;
        h2_apply(&self.structure, &self.basis, &self.near, x, |i, xh| {
            let f = &c.factors[c.block_coupling[i]];
            Ok(f.u.matvec(&f.v.matvec_t(xh)))
        })
    }

    pub fn metrics(&self) -> MatrixMetrics {
        let st = &self.structure;
        let c = &self.couplings;
        let pd = st.config.p_s.pow(st.tree.d as u32) as u64;
        let coupling: u64 = c.block_coupling.iter().map(|&k| 2 * pd * c.factors[k].rank() as u64).sum();
        let stored: u64 = c.factors.iter().map(|f| f.storage() as u64).sum();
        let basis = self.basis.storage();
        let nf = st.near_sizes();
        MatrixMetrics {
            n: st.n(),
            storage_entries: basis + stored + nf,
            nf_entries: nf,
            ff_entries: basis + coupling,
            coupling_entries: Some(coupling),
            rank: mean_rank(c.block_coupling.iter().map(|&k| c.factors[k].rank())),
            c_sp: st.blocks.c_sp,
            m_a: c.factors.len(),
            n_far: st.blocks.far.len(),
            n_near: st.blocks.near.len(),
        }
    }
}

impl LinearOperator for H2Hca {
    fn size(&self) -> usize {
        self.structure.n()
    }
    fn apply(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.mvm(x)
    }
}
