//! Versioned binary container for offline objects.
//!
//! Layout: magic `PHMT`, `u32` version, `u8` kind, then the build config,
//! kernel spec, points, parameter grids and tree topology, followed by the
//! payload. All integers are `u64` and all reals `f64`, little-endian. On
//! load the trees are rebuilt from the points and checked against the stored
//! topology.

use std::path::Path;
use std::sync::Arc;

use phmat_core::chebyshev::ClusterBasisFactors;
use phmat_core::farfield::{CouplingSet, CouplingTt, FarBlockH};
use phmat_core::geometry::{Block, Hypercube, PointSet};
use phmat_core::kernels::{Interval, KernelFamily, KernelSpec};
use phmat_core::linalg::Mat;
use phmat_core::nearfield::NearBlockTt;
use phmat_core::phmatrix::{
    BuildConfig, H2Basis, NearField, NearMode, OfflineStats, ParametricH2Matrix, ParametricHMatrix, Structure,
};
use phmat_core::tt::{TtCore, TtTensor};

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"PHMT";
pub const VERSION: u32 = 1;

const KIND_H: u8 = 1;
const KIND_H2: u8 = 2;

#[derive(Debug, Clone)]
pub enum Artifact {
    H(ParametricHMatrix),
    H2(ParametricH2Matrix),
}

impl Artifact {
    pub fn structure(&self) -> &Structure {
        match self {
            Artifact::H(p) => &p.structure,
            Artifact::H2(p) => &p.structure,
        }
    }

    pub fn stats(&self) -> &OfflineStats {
        match self {
            Artifact::H(p) => &p.stats,
            Artifact::H2(p) => &p.stats,
        }
    }
}

fn bad(msg: impl Into<String>) -> HarnessError {
    HarnessError::Artifact(msg.into())
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn i64(&mut self, v: i64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn bool(&mut self, v: bool) {
        self.u8(v as u8);
    }
    fn f64s(&mut self, v: &[f64]) {
        self.usize(v.len());
        for &x in v {
            self.f64(x);
        }
    }
    fn str(&mut self, s: &str) {
        self.usize(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn mat(&mut self, m: &Mat) {
        self.usize(m.rows);
        self.usize(m.cols);
        self.f64s(&m.data);
    }
    fn mats(&mut self, ms: &[Mat]) {
        self.usize(ms.len());
        for m in ms {
            self.mat(m);
        }
    }
    fn tt(&mut self, t: &TtTensor) {
        self.usize(t.cores.len());
        for c in &t.cores {
            self.usize(c.r0);
            self.usize(c.m);
            self.usize(c.r1);
            self.f64s(&c.data);
        }
    }
    fn block(&mut self, b: &Block) {
        self.usize(b.sigma);
        self.usize(b.tau);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < k {
            return Err(bad("unexpected end of file"));
        }
        let s = &self.buf[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| bad("length overflow"))
    }
    /// A count of items each at least `unit` bytes long.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return Err(bad("length exceeds file size"));
        }
        Ok(n)
    }
    fn i64(&mut self) -> Result<i64> {
        Ok(i64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn bool(&mut self) -> Result<bool> {
        match self.u8()? {
            0 => Ok(false),
            1 => Ok(true),
            v => Err(bad(format!("invalid flag {v}"))),
        }
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
    fn str(&mut self) -> Result<String> {
        let n = self.len(1)?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| bad("invalid utf-8"))
    }
    fn mat(&mut self) -> Result<Mat> {
        let (r, c) = (self.usize()?, self.usize()?);
        Ok(Mat::from_col_major(r, c, self.f64s()?)?)
    }
    fn mats(&mut self) -> Result<Vec<Mat>> {
        let n = self.len(24)?;
        (0..n).map(|_| self.mat()).collect()
    }
    fn tt(&mut self) -> Result<TtTensor> {
        let n = self.len(32)?;
        let cores = (0..n)
            .map(|_| {
                let (r0, m, r1) = (self.usize()?, self.usize()?, self.usize()?);
                Ok(TtCore::new(r0, m, r1, self.f64s()?)?)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TtTensor::new(cores)?)
    }
    fn block(&mut self) -> Result<Block> {
        Ok(Block { sigma: self.usize()?, tau: self.usize()? })
    }
}

fn write_header(w: &mut Writer, kind: u8, st: &Structure) {
    w.0.extend_from_slice(MAGIC);
    w.0.extend_from_slice(&VERSION.to_le_bytes());
    w.u8(kind);
    let c = &st.config;
    w.usize(c.l_max);
    w.usize(c.p_s);
    w.usize(c.p_theta);
    w.f64(c.eps);
    w.f64(c.eta);
    w.u64(c.seed);
    w.u8(match c.near_mode {
        NearMode::Tt => 0,
        NearMode::Direct => 1,
    });
    w.bool(c.use_cache);
    w.usize(c.r_max_far);
    w.usize(c.r_max_near);
    match &c.root_box {
        None => w.bool(false),
        Some(b) => {
            w.bool(true);
            w.f64s(&b.lo);
            w.f64s(&b.hi);
        }
    }
    w.str(st.spec.family.id());
    w.usize(st.spec.theta_box.len());
    for iv in &st.spec.theta_box {
        w.f64(iv.lo);
        w.f64(iv.hi);
    }
    w.usize(st.points.dim());
    w.f64s(st.points.coords());
    w.usize(st.theta_grids.len());
    for g in &st.theta_grids {
        w.f64s(&g.nodes);
    }
    w.usize(st.tree.len());
    for node in &st.tree.nodes {
        w.usize(node.level);
        w.i64(node.parent.map_or(-1, |p| p as i64));
        w.usize(node.size());
    }
    for list in [&st.blocks.far, &st.blocks.near] {
        w.usize(list.len());
        for b in list {
            w.block(b);
        }
    }
}

fn read_header(r: &mut Reader<'_>) -> Result<(u8, Structure)> {
    if r.take(4)? != MAGIC {
        return Err(bad("not a parametric matrix artifact"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let kind = r.u8()?;
    if kind != KIND_H && kind != KIND_H2 {
        return Err(bad(format!("unknown kind {kind}")));
    }
    let l_max = r.usize()?;
    let p_s = r.usize()?;
    let p_theta = r.usize()?;
    let eps = r.f64()?;
    let eta = r.f64()?;
    let seed = r.u64()?;
    let near_mode = match r.u8()? {
        0 => NearMode::Tt,
        1 => NearMode::Direct,
        v => return Err(bad(format!("unknown near mode {v}"))),
    };
    let use_cache = r.bool()?;
    let r_max_far = r.usize()?;
    let r_max_near = r.usize()?;
    let root_box = if r.bool()? { Some(Hypercube::new(r.f64s()?, r.f64s()?)?) } else { None };
    let config =
        BuildConfig { l_max, p_s, p_theta, eps, eta, seed, near_mode, use_cache, r_max_far, r_max_near, root_box };
    let family = KernelFamily::from_id(&r.str()?)?;
    let nbox = r.len(16)?;
    let theta_box = (0..nbox).map(|_| Ok(Interval::new(r.f64()?, r.f64()?))).collect::<Result<Vec<_>>>()?;
    let spec = KernelSpec::new(family, theta_box)?;
    let d = r.usize()?;
    let points = PointSet::new(d, r.f64s()?)?;
    let st = Structure::new(points, spec, config)?;

    let mismatch = |what: &str| bad(format!("{what} does not match the rebuilt structure"));
    let ngrids = r.len(8)?;
    if ngrids != st.theta_grids.len() {
        return Err(mismatch("parameter grid count"));
    }
    for g in &st.theta_grids {
        if r.f64s()? != g.nodes {
            return Err(mismatch("parameter grid"));
        }
    }
    if r.len(24)? != st.tree.len() {
        return Err(mismatch("cluster tree size"));
    }
    for node in &st.tree.nodes {
        let level = r.usize()?;
        let parent = r.i64()?;
        let size = r.usize()?;
        if level != node.level || parent != node.parent.map_or(-1, |p| p as i64) || size != node.size() {
            return Err(mismatch("cluster tree"));
        }
    }
    for list in [&st.blocks.far, &st.blocks.near] {
        let n = r.len(16)?;
        if n != list.len() {
            return Err(mismatch("block list"));
        }
        for b in list {
            if r.block()? != *b {
                return Err(mismatch("block list"));
            }
        }
    }
    Ok((kind, st))
}

fn write_stats(w: &mut Writer, s: &OfflineStats) {
    w.u64(s.far_evals);
    w.u64(s.near_evals);
    w.usize(s.unique_keys);
    w.usize(s.couplings);
    w.usize(s.far_rank_capped);
    w.usize(s.near_rank_capped);
    w.f64(s.max_far_error);
    w.f64(s.max_near_error);
}

fn read_stats(r: &mut Reader<'_>) -> Result<OfflineStats> {
    Ok(OfflineStats {
        far_evals: r.u64()?,
        near_evals: r.u64()?,
        unique_keys: r.usize()?,
        couplings: r.usize()?,
        far_rank_capped: r.usize()?,
        near_rank_capped: r.usize()?,
        max_far_error: r.f64()?,
        max_near_error: r.f64()?,
    })
}

fn write_couplings(w: &mut Writer, c: &CouplingSet) {
    w.usize(c.couplings.len());
    for t in &c.couplings {
        w.usize(t.d);
        w.usize(t.d_theta);
        w.bool(t.rank_capped);
        w.f64(t.error_estimate);
        w.u64(t.evals);
        w.tt(&t.tt);
    }
    w.usize(c.block_coupling.len());
    for &i in &c.block_coupling {
        w.usize(i);
    }
    w.usize(c.unique_keys);
    w.usize(c.unkeyed);
}

fn read_couplings(r: &mut Reader<'_>, st: &Structure) -> Result<CouplingSet> {
    let n = r.len(40)?;
    let couplings = (0..n)
        .map(|_| {
            let d = r.usize()?;
            let d_theta = r.usize()?;
            let rank_capped = r.bool()?;
            let error_estimate = r.f64()?;
            let evals = r.u64()?;
            let tt = r.tt()?;
            if d != st.points.dim() || d_theta != st.spec.d_theta() || tt.order() != 2 * d + d_theta {
                return Err(bad("coupling tensor order does not match"));
            }
            Ok(Arc::new(CouplingTt { tt, d, d_theta, rank_capped, error_estimate, evals }))
        })
        .collect::<Result<Vec<_>>>()?;
    let nb = r.len(8)?;
    if nb != st.blocks.far.len() {
        return Err(bad("coupling map does not match the far blocks"));
    }
    let block_coupling = (0..nb)
        .map(|_| {
            let i = r.usize()?;
            if i >= couplings.len() {
                return Err(bad("coupling index out of range"));
            }
            Ok(i)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CouplingSet { couplings, block_coupling, unique_keys: r.usize()?, unkeyed: r.usize()? })
}

fn write_near(w: &mut Writer, near: &NearField) {
    match near {
        NearField::Direct => w.u8(0),
        NearField::Tt(blocks) => {
            w.u8(1);
            w.usize(blocks.len());
            for b in blocks {
                w.block(&b.block);
                w.usize(b.n_sigma);
                w.usize(b.n_tau);
                w.tt(&b.tt);
                w.bool(b.rank_capped);
                w.f64(b.error_estimate);
                w.u64(b.evals);
            }
        }
    }
}

fn read_near(r: &mut Reader<'_>, st: &Structure) -> Result<NearField> {
    match r.u8()? {
        0 => Ok(NearField::Direct),
        1 => {
            let n = r.len(32)?;
            if n != st.blocks.near.len() {
                return Err(bad("near block count does not match"));
            }
            let blocks = st
                .blocks
                .near
                .iter()
                .map(|expected| {
                    let block = r.block()?;
                    let n_sigma = r.usize()?;
                    let n_tau = r.usize()?;
                    let tt = r.tt()?;
                    if block != *expected || tt.modes().first() != Some(&(n_sigma * n_tau)) {
                        return Err(bad("near block does not match"));
                    }
                    Ok(NearBlockTt {
                        block,
                        n_sigma,
                        n_tau,
                        tt,
                        rank_capped: r.bool()?,
                        error_estimate: r.f64()?,
                        evals: r.u64()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(NearField::Tt(blocks))
        }
        v => Err(bad(format!("unknown near field tag {v}"))),
    }
}

fn write_optional_mats(w: &mut Writer, v: &Option<Vec<Mat>>) {
    match v {
        None => w.bool(false),
        Some(ms) => {
            w.bool(true);
            w.mats(ms);
        }
    }
}

fn read_optional_mats(r: &mut Reader<'_>) -> Result<Option<Vec<Mat>>> {
    Ok(if r.bool()? { Some(r.mats()?) } else { None })
}

pub fn to_bytes(a: &Artifact) -> Vec<u8> {
    let mut w = Writer::default();
    match a {
        Artifact::H(p) => {
            write_header(&mut w, KIND_H, &p.structure);
            write_stats(&mut w, &p.stats);
            write_couplings(&mut w, &p.couplings);
            w.usize(p.far.len());
            for f in &p.far {
                w.block(&f.block);
                w.usize(f.coupling);
                w.mat(&f.s);
                w.mat(&f.t);
            }
            write_near(&mut w, &p.near);
        }
        Artifact::H2(p) => {
            write_header(&mut w, KIND_H2, &p.structure);
            write_stats(&mut w, &p.stats);
            write_couplings(&mut w, &p.couplings);
            w.usize(p.basis.p_s);
            w.usize(p.basis.leaf.len());
            for (leaf, transfer) in p.basis.leaf.iter().zip(&p.basis.transfer) {
                write_optional_mats(&mut w, &leaf.as_ref().map(|f| f.factors.clone()));
                write_optional_mats(&mut w, transfer);
            }
            write_near(&mut w, &p.near);
        }
    }
    w.0
}

pub fn from_bytes(buf: &[u8]) -> Result<Artifact> {
    let mut r = Reader { buf, pos: 0 };
    let (kind, st) = read_header(&mut r)?;
    let stats = read_stats(&mut r)?;
    let couplings = read_couplings(&mut r, &st)?;
    let out = if kind == KIND_H {
        let n = r.len(16)?;
        if n != st.blocks.far.len() {
            return Err(bad("far block count does not match"));
        }
        let far = st
            .blocks
            .far
            .iter()
            .zip(&couplings.block_coupling)
            .map(|(expected, &ci)| {
                let block = r.block()?;
                let coupling = r.usize()?;
                if block != *expected || coupling != ci {
                    return Err(bad("far block does not match"));
                }
                Ok(FarBlockH { block, coupling, s: r.mat()?, t: r.mat()? })
            })
            .collect::<Result<Vec<_>>>()?;
        let near = read_near(&mut r, &st)?;
        Artifact::H(ParametricHMatrix { structure: st, couplings, far, near, stats })
    } else {
        let p_s = r.usize()?;
        if p_s != st.config.p_s || r.len(2)? != st.tree.len() {
            return Err(bad("cluster basis does not match"));
        }
        let mut leaf = Vec::with_capacity(st.tree.len());
        let mut transfer = Vec::with_capacity(st.tree.len());
        for _ in 0..st.tree.len() {
            leaf.push(read_optional_mats(&mut r)?.map(|factors| ClusterBasisFactors { factors }));
            transfer.push(read_optional_mats(&mut r)?);
        }
        let near = read_near(&mut r, &st)?;
        Artifact::H2(ParametricH2Matrix { structure: st, basis: H2Basis { p_s, leaf, transfer }, couplings, near, stats })
    };
    if r.pos != buf.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(out)
}

pub fn save(path: &Path, a: &Artifact) -> Result<()> {
    std::fs::write(path, to_bytes(a))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Artifact> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::generate_points;
    use phmat_core::kernels::{EvalCounter, KernelFamily, KernelSpec};
    use phmat_core::phmatrix::BuildConfig;
    use proptest::prelude::*;
    use std::sync::OnceLock;

    fn small(h2: bool) -> &'static [u8] {
        static BYTES: [OnceLock<Vec<u8>>; 2] = [OnceLock::new(), OnceLock::new()];
        BYTES[h2 as usize].get_or_init(|| {
            let pts = generate_points(150, 2, 3).unwrap();
            let spec = KernelSpec::with_default_box(KernelFamily::Mn);
            let cfg = BuildConfig { l_max: 2, p_s: 4, p_theta: 4, ..BuildConfig::new(2) };
            let cnt = EvalCounter::new();
            let a = if h2 {
                Artifact::H2(ParametricH2Matrix::build(pts, spec, cfg, &cnt).unwrap())
            } else {
                Artifact::H(ParametricHMatrix::build(pts, spec, cfg, &cnt).unwrap())
            };
            to_bytes(&a)
        })
    }

    #[test]
    fn bytes_are_stable_across_a_round_trip() {
        for h2 in [false, true] {
            let b = small(h2);
            assert_eq!(to_bytes(&from_bytes(b).unwrap()), b);
        }
    }

    proptest! {
        #[test]
        fn every_truncation_is_rejected(h2: bool, frac in 0.0f64..1.0) {
            let b = small(h2);
            let cut = ((b.len() as f64) * frac) as usize;
            prop_assert!(from_bytes(&b[..cut.min(b.len() - 1)]).is_err());
        }

        #[test]
        fn flipped_magic_or_kind_is_rejected(h2: bool, pos in 0usize..5, bit in 0u8..8) {
            let mut b = small(h2).to_vec();
            b[pos] ^= 1 << bit;
            prop_assert!(from_bytes(&b).is_err());
        }
    }
}
