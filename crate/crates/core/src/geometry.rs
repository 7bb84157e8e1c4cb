//! Point sets, boxes, the uniform cluster tree and the block cluster tree.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Axis-aligned box `[lo_1, hi_1] x ... x [lo_d, hi_d]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypercube {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl Hypercube {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(Error::Dimension { expected: lo.len(), found: hi.len() });
        }
        if lo.iter().zip(&hi).any(|(a, b)| !(a <= b) || !a.is_finite() || !b.is_finite()) {
            return Err(Error::Input("box bounds must be finite with lo <= hi".into()));
        }
        Ok(Self { lo, hi })
    }

    pub fn unit(d: usize) -> Self {
        Self { lo: vec![0.0; d], hi: vec![1.0; d] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn side(&self, k: usize) -> f64 {
        self.hi[k] - self.lo[k]
    }

    pub fn diam(&self) -> f64 {
        diam(self)
    }

    pub fn contains(&self, x: &[f64]) -> bool {
        x.iter().enumerate().all(|(k, v)| *v >= self.lo[k] && *v <= self.hi[k])
    }

    /// Child box for the little-endian child code (bit k set = upper half in dimension k).
    pub fn child(&self, code: usize) -> Hypercube {
        let d = self.dim();
        let mut lo = self.lo.clone();
        let mut hi = self.hi.clone();
        for k in 0..d {
            let mid = 0.5 * (self.lo[k] + self.hi[k]);
            if code >> k & 1 == 1 {
                lo[k] = mid;
            } else {
                hi[k] = mid;
            }
        }
        Hypercube { lo, hi }
    }
}

pub fn diam(b: &Hypercube) -> f64 {
    let s: f64 = (0..b.dim()).map(|k| b.side(k) * b.side(k)).sum();
    libm::sqrt(s)
}

pub fn dist(b1: &Hypercube, b2: &Hypercube) -> f64 {
    let mut s = 0.0;
    for k in 0..b1.dim() {
        let g1 = (b1.lo[k] - b2.hi[k]).max(0.0);
        let g2 = (b2.lo[k] - b1.hi[k]).max(0.0);
        s += g1 * g1 + g2 * g2;
    }
    libm::sqrt(s)
}

pub fn is_admissible(b1: &Hypercube, b2: &Hypercube, eta: f64) -> bool {
    diam(b1).max(diam(b2)) <= eta * dist(b1, b2)
}

/// n points in R^d, stored point-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PointSet {
    d: usize,
    coords: Vec<f64>,
}

impl PointSet {
    pub fn new(d: usize, coords: Vec<f64>) -> Result<Self> {
        if d == 0 || coords.len() % d != 0 {
            return Err(Error::Input(format!("{} coordinates do not form {d}-dimensional points", coords.len())));
        }
        if coords.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite coordinate".into()));
        }
        Ok(Self { d, coords })
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.d..(i + 1) * self.d]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    /// Coordinates of the selected points, point-major.
    pub fn gather(&self, idx: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(idx.len() * self.d);
        for &i in idx {
            out.extend_from_slice(self.point(i));
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterNode {
    /// Sorted global indices.
    pub indices: Vec<usize>,
    pub bbox: Hypercube,
    pub level: usize,
    pub parent: Option<usize>,
    /// Node ids of the 2^d children, ordered by child code; empty for leaves.
    pub children: Vec<usize>,
}

impl ClusterNode {
    pub fn size(&self) -> usize {
        self.indices.len()
    }

    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

/// Uniform 2^d-ary tree. Nodes are stored level by level, so a reverse scan
/// visits children before parents.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterTree {
    pub nodes: Vec<ClusterNode>,
    pub d: usize,
    pub l_max: usize,
    pub n: usize,
}

impl ClusterTree {
    pub fn build(points: &PointSet, root_box: &Hypercube, l_max: usize) -> Result<Self> {
        let d = points.dim();
        if root_box.dim() != d {
            return Err(Error::Dimension { expected: d, found: root_box.dim() });
        }
        if d * l_max >= 40 {
            return Err(Error::Input(format!("tree depth {l_max} too large for d = {d}")));
        }
        for i in 0..points.len() {
            if !root_box.contains(points.point(i)) {
                return Err(Error::Input(format!("point {i} lies outside the root box")));
            }
        }
        let root = ClusterNode {
            indices: (0..points.len()).collect(),
            bbox: root_box.clone(),
            level: 0,
            parent: None,
            children: Vec::new(),
        };
        let mut nodes = vec![root];
        let nchild = 1usize << d;
        let mut head = 0;
        while head < nodes.len() {
            if nodes[head].level < l_max {
                let first = nodes.len();
                let bbox = nodes[head].bbox.clone();
                let mid: Vec<f64> = (0..d).map(|k| 0.5 * (bbox.lo[k] + bbox.hi[k])).collect();
                let mut parts: Vec<Vec<usize>> = vec![Vec::new(); nchild];
                for &i in &nodes[head].indices {
                    let x = points.point(i);
                    let mut code = 0;
                    for k in 0..d {
                        if x[k] > mid[k] {
                            code |= 1 << k;
                        }
                    }
                    parts[code].push(i);
                }
                let level = nodes[head].level + 1;
                for (code, indices) in parts.into_iter().enumerate() {
                    nodes.push(ClusterNode {
                        indices,
                        bbox: bbox.child(code),
                        level,
                        parent: Some(head),
                        children: Vec::new(),
                    });
                }
                nodes[head].children = (first..first + nchild).collect();
            }
            head += 1;
        }
        Ok(Self { nodes, d, l_max, n: points.len() })
    }

    pub fn root(&self) -> usize {
        0
    }

    pub fn node(&self, i: usize) -> &ClusterNode {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.nodes.len()).filter(|&i| self.nodes[i].is_leaf())
    }

    /// n / 2^(d l_max), the nominal leaf size.
    pub fn c_leaf(&self) -> f64 {
        self.n as f64 / (1u64 << (self.d * self.l_max)) as f64
    }

    pub fn max_leaf_size(&self) -> usize {
        self.leaves().map(|i| self.nodes[i].size()).max().unwrap_or(0)
    }

    /// True when some leaf holds more than 4 nominal leaf sizes.
    pub fn is_clustered(&self) -> bool {
        self.max_leaf_size() as f64 > 4.0 * self.c_leaf().max(1.0)
    }

    /// Checks the partition and containment properties.
    pub fn validate(&self, points: &PointSet) -> Result<()> {
        for (id, node) in self.nodes.iter().enumerate() {
            for &i in &node.indices {
                if !node.bbox.contains(points.point(i)) {
                    return Err(Error::Input(format!("point {i} outside box of node {id}")));
                }
            }
            if node.indices.windows(2).any(|w| w[0] >= w[1]) {
                return Err(Error::Input(format!("node {id} index set not sorted")));
            }
            if node.is_leaf() {
                if node.level != self.l_max {
                    return Err(Error::Input(format!("leaf {id} at level {}", node.level)));
                }
            } else {
                let mut all: Vec<usize> = node
                    .children
                    .iter()
                    .flat_map(|&c| self.nodes[c].indices.iter().copied())
                    .collect();
                all.sort_unstable();
                if all != node.indices {
                    return Err(Error::Input(format!("children of node {id} do not partition it")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Block {
    pub sigma: usize,
    pub tau: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockClusterTree {
    pub eta: f64,
    /// Admissible leaves (far field).
    pub far: Vec<Block>,
    /// Inadmissible leaves (near field).
    pub near: Vec<Block>,
    /// Number of blocks in the whole tree, inner ones included.
    pub n_blocks: usize,
    pub c_sp: usize,
}

impl BlockClusterTree {
    pub fn build(tree: &ClusterTree, eta: f64) -> Result<Self> {
        if !(eta > 0.0) {
            return Err(Error::Input("eta must be positive".into()));
        }
        let mut far = Vec::new();
        let mut near = Vec::new();
        let mut row_count = vec![0usize; tree.len()];
        let mut col_count = vec![0usize; tree.len()];
        let mut n_blocks = 0;
        let mut stack = vec![Block { sigma: tree.root(), tau: tree.root() }];
        while let Some(b) = stack.pop() {
            let s = tree.node(b.sigma);
            let t = tree.node(b.tau);
            if s.size() == 0 || t.size() == 0 {
                continue;
            }
            n_blocks += 1;
            row_count[b.sigma] += 1;
            col_count[b.tau] += 1;
            if is_admissible(&s.bbox, &t.bbox, eta) {
                far.push(b);
            } else if !s.is_leaf() && !t.is_leaf() {
                // reversed so that pops come out in child-code order
                for &cs in s.children.iter().rev() {
                    for &ct in t.children.iter().rev() {
                        stack.push(Block { sigma: cs, tau: ct });
                    }
                }
            } else {
                near.push(b);
            }
        }
        let c_sp = row_count.iter().chain(&col_count).copied().max().unwrap_or(0);
        Ok(Self { eta, far, near, n_blocks, c_sp })
    }

    pub fn sparsity_constant(&self) -> usize {
        self.c_sp
    }

    /// Sum of n_sigma * n_tau over all leaves; equals n^2 for a valid partition.
    pub fn coverage(&self, tree: &ClusterTree) -> u64 {
        self.far
            .iter()
            .chain(&self.near)
            .map(|b| (tree.node(b.sigma).size() * tree.node(b.tau).size()) as u64)
            .sum()
    }
}

/// Cardinality checks from the complexity analysis of uniform trees.
#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub c_sp: usize,
    pub c_sp_bound: usize,
    pub n_nodes: usize,
    pub n_nodes_bound: f64,
    pub n_near: usize,
    pub n_near_bound: f64,
    pub n_far: usize,
    pub n_far_bound: f64,
    pub coverage: u64,
    pub n_squared: u64,
}

impl StructureReport {
    pub fn new(tree: &ClusterTree, blocks: &BlockClusterTree) -> Self {
        let n = tree.n as f64;
        let c_leaf = tree.c_leaf();
        let c_sp = blocks.c_sp;
        Self {
            c_sp,
            c_sp_bound: 3usize.pow(tree.d as u32) * 2usize.pow(tree.d as u32),
            n_nodes: tree.len(),
            n_nodes_bound: 2.0 * n / c_leaf,
            n_near: blocks.near.len(),
            n_near_bound: c_sp as f64 * n / c_leaf,
            n_far: blocks.far.len(),
            n_far_bound: 2.0 * c_sp as f64 * n / c_leaf,
            coverage: blocks.coverage(tree),
            n_squared: (tree.n as u64) * (tree.n as u64),
        }
    }

    pub fn holds(&self) -> bool {
        self.c_sp <= self.c_sp_bound
            && self.n_nodes as f64 <= self.n_nodes_bound
            && self.n_near as f64 <= self.n_near_bound
            && self.n_far as f64 <= self.n_far_bound
            && self.coverage == self.n_squared
    }
}
