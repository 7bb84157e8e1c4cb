//! Parametric near field: for an inadmissible block the tensor
//! `A[i + n_sigma j, k_1, ..] = kappa(x_i, y_j; theta nodes)` is compressed
//! by TT-cross offline and contracted with the parameter cardinal vectors
//! online.

use alloc::vec::Vec;

use crate::error::{check_len, Result};
use crate::geometry::{Block, ClusterTree, PointSet};
use crate::kernels::{distance, CountedKernel, EvalCounter, KernelSpec};
use crate::linalg::Mat;
use crate::tt::{tt_cross, CrossOptions, EntryOracle, TtTensor};

/// Pairwise distances of a block, `i + n_sigma j`.
pub fn block_distances(points: &PointSet, rows: &[usize], cols: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for &j in cols {
        let y = points.point(j);
        for &i in rows {
            out.push(distance(points.point(i), y));
        }
    }
    out
}

/// Counted oracle of shape `(n_sigma n_tau, p_theta, ..)`.
pub struct NearOracle<'a> {
    dist: Vec<f64>,
    theta_nodes: &'a [Vec<f64>],
    kernel: CountedKernel<'a>,
}

impl<'a> NearOracle<'a> {
    pub fn new(
        spec: &'a KernelSpec,
        points: &PointSet,
        tree: &ClusterTree,
        b: &Block,
        theta_nodes: &'a [Vec<f64>],
        counter: &'a EvalCounter,
    ) -> Self {
        let dist = block_distances(points, &tree.node(b.sigma).indices, &tree.node(b.tau).indices);
        Self { dist, theta_nodes, kernel: CountedKernel::new(spec, counter) }
    }
}

impl EntryOracle for NearOracle<'_> {
    fn shape(&self) -> Vec<usize> {
        let mut s = Vec::with_capacity(1 + self.theta_nodes.len());
        s.push(self.dist.len());
        s.extend(self.theta_nodes.iter().map(|t| t.len()));
        s
    }

    fn entry(&self, idx: &[usize]) -> f64 {
        let mut theta = [0.0f64; 4];
        let dt = self.theta_nodes.len();
        for (k, t) in self.theta_nodes.iter().enumerate() {
            theta[k] = t[idx[1 + k]];
        }
        self.kernel.radial(self.dist[idx[0]], &theta[..dt])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearBlockTt {
    pub block: Block,
    pub n_sigma: usize,
    pub n_tau: usize,
    pub tt: TtTensor,
    pub rank_capped: bool,
    pub error_estimate: f64,
    pub evals: u64,
}

pub struct NearSetup<'a> {
    pub points: &'a PointSet,
    pub tree: &'a ClusterTree,
    pub spec: &'a KernelSpec,
    pub theta_nodes: &'a [Vec<f64>],
    pub eps: f64,
    pub r_max: usize,
}

pub fn nearfield_offline(setup: &NearSetup<'_>, b: &Block, seed: u64, counter: &EvalCounter) -> Result<NearBlockTt> {
    let local = EvalCounter::new();
    let res = {
        let o = NearOracle::new(setup.spec, setup.points, setup.tree, b, setup.theta_nodes, &local);
        tt_cross(&o, &CrossOptions::new(setup.eps, setup.r_max, seed))?
    };
    counter.add(local.get());
    Ok(NearBlockTt {
        block: *b,
        n_sigma: setup.tree.node(b.sigma).size(),
        n_tau: setup.tree.node(b.tau).size(),
        tt: res.tt,
        rank_capped: res.rank_capped,
        error_estimate: res.error_estimate,
        evals: local.get(),
    })
}

/// `D(theta)`: contraction of the parameter cores, then the first core,
/// reshaped column-major to `n_sigma x n_tau`. No kernel evaluations.
pub fn nearfield_online(nb: &NearBlockTt, vs: &[Vec<f64>]) -> Result<Mat> {
    let cores = &nb.tt.cores;
    check_len(cores.len() - 1, vs.len())?;
    // w = prod_i G_{i+1} x_2 v_i, an r_1 x 1 matrix
    let mut w: Option<Mat> = None;
    for (g, v) in cores[1..].iter().zip(vs).rev() {
        let c = g.contract_mode2(v);
        w = Some(match w {
            None => c,
            Some(acc) => c.matmul(&acc),
        });
    }
    let first = cores[0].unfold_right();
    let a = match w {
        Some(w) => first.matmul(&w),
        None => first,
    };
    Ok(Mat { rows: nb.n_sigma, cols: nb.n_tau, data: a.data })
}

/// Exact block at theta, charged to `counter`.
pub fn direct_block(
    spec: &KernelSpec,
    points: &PointSet,
    rows: &[usize],
    cols: &[usize],
    theta: &[f64],
    counter: &EvalCounter,
) -> Mat {
    let k = CountedKernel::new(spec, counter);
    let mut m = Mat::zeros(rows.len(), cols.len());
    for (jj, &j) in cols.iter().enumerate() {
        let y = points.point(j);
        for (o, &i) in m.col_mut(jj).iter_mut().zip(rows) {
            *o = k.eval(points.point(i), y, theta);
        }
    }
    m
}
