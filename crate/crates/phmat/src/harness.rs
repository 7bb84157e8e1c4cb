//! Point generation, the sampled error estimate and the experiment driver.

use std::time::{Duration, Instant};

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use phmat_core::baselines::{aca_far_blocks, dense_near_blocks, hca_couplings, H2Hca, HAca};
use phmat_core::geometry::PointSet;
use phmat_core::kernels::{EvalCounter, KernelSpec, StageCounters};
use phmat_core::linalg::norm2;
use phmat_core::metrics::MatrixMetrics;
use phmat_core::nearfield::direct_block;
use phmat_core::par::mix;
use phmat_core::phmatrix::{
    H2Basis, InstantiatedH2Matrix, InstantiatedHMatrix, ParametricH2Matrix, ParametricHMatrix, Structure,
};

use crate::config::{ExperimentConfig, Method};
use crate::error::Result;
use crate::output::{MetricsRecord, RunReport, ThetaSample};

const POINT_STREAM: u64 = 0x5054;
const ROW_STREAM: u64 = 0x524f;
const THETA_STREAM: u64 = 0x5448;
const X_STREAM: u64 = 0x5856;

fn rng_for(seed: u64, stream: u64, n: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(seed ^ stream) ^ n as u64))
}

/// `n` points drawn uniformly from `[0,1]^d`, row-major.
pub fn generate_points(n: usize, d: usize, seed: u64) -> Result<PointSet> {
    let mut rng = rng_for(seed, POINT_STREAM, 0);
    let coords = (0..n * d).map(|_| rng.gen::<f64>()).collect();
    Ok(PointSet::new(d, coords)?)
}

/// Uniform draws from the parameter box.
pub fn sample_thetas(spec: &KernelSpec, count: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = rng_for(seed, THETA_STREAM, 0);
    (0..count)
        .map(|_| spec.theta_box.iter().map(|iv| rng.gen_range(iv.lo..=iv.hi)).collect())
        .collect()
}

/// Row subset, parameter samples and probe vector shared by every method
/// run with the same `(n, seed)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ErrorProtocol {
    pub rows: Vec<usize>,
    pub thetas: Vec<Vec<f64>>,
    pub x: Vec<f64>,
}

impl ErrorProtocol {
    pub fn new(spec: &KernelSpec, n: usize, n_rows: usize, n_theta: usize, seed: u64) -> Self {
        let rows = if n <= n_rows {
            (0..n).collect()
        } else {
            let mut r = sample(&mut rng_for(seed, ROW_STREAM, n), n, n_rows).into_vec();
            r.sort_unstable();
            r
        };
        let mut xr = rng_for(seed, X_STREAM, n);
        let x = (0..n).map(|_| xr.gen_range(-1.0..=1.0)).collect();
        Self { rows, thetas: sample_thetas(spec, n_theta, seed), x }
    }

    /// `[K(theta) x]_J` from exact kernel rows.
    pub fn exact(&self, spec: &KernelSpec, points: &PointSet, theta: &[f64], audit: &EvalCounter) -> Result<Vec<f64>> {
        spec.check_theta(theta)?;
        let all: Vec<usize> = (0..points.len()).collect();
        let k = direct_block(spec, points, &self.rows, &all, theta, audit);
        Ok(k.matvec(&self.x))
    }

    pub fn restrict(&self, y: &[f64]) -> Vec<f64> {
        self.rows.iter().map(|&i| y[i]).collect()
    }
}

/// `||a - b|| / ||a||`, with `a` the reference.
pub fn relative_error(exact: &[f64], approx: &[f64]) -> f64 {
    let diff: Vec<f64> = exact.iter().zip(approx).map(|(a, b)| a - b).collect();
    norm2(&diff) / norm2(exact)
}

/// Mean relative residual over paired samples.
pub fn estimate_error(exact: &[Vec<f64>], approx: &[Vec<f64>]) -> f64 {
    if exact.is_empty() {
        return 0.0;
    }
    exact.iter().zip(approx).map(|(e, a)| relative_error(e, a)).sum::<f64>() / exact.len() as f64
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

/// Runs `f` `repeats` times, returning the last value and the median time.
pub fn timed_median<T>(repeats: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, f64)> {
    let mut times = Vec::with_capacity(repeats.max(1));
    let mut out = None;
    for _ in 0..repeats.max(1) {
        let t = Instant::now();
        out = Some(f()?);
        times.push(secs(t.elapsed()));
    }
    times.sort_by(f64::total_cmp);
    Ok((out.expect("at least one repetition"), times[times.len() / 2]))
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let t = Instant::now();
    let v = f()?;
    Ok((v, secs(t.elapsed())))
}

struct Online {
    nf: f64,
    ff: f64,
    mvm: f64,
    y: Vec<f64>,
}

enum Prepared {
    H(Box<ParametricHMatrix>),
    H2(Box<ParametricH2Matrix>),
    Aca(Box<Option<Structure>>),
    Hca(Box<Option<(Structure, H2Basis)>>),
}

fn average(metrics: &[MatrixMetrics]) -> MatrixMetrics {
    let mut m = metrics[0].clone();
    let k = metrics.len() as f64;
    let mean = |f: &dyn Fn(&MatrixMetrics) -> u64| (metrics.iter().map(|m| f(m) as f64).sum::<f64>() / k).round() as u64;
    m.storage_entries = mean(&|m| m.storage_entries);
    m.nf_entries = mean(&|m| m.nf_entries);
    m.ff_entries = mean(&|m| m.ff_entries);
    m.coupling_entries = m.coupling_entries.map(|_| mean(&|m| m.coupling_entries.unwrap_or(0)));
    m.rank = metrics.iter().map(|m| m.rank).sum::<f64>() / k;
    m
}

impl Prepared {
    fn offline(cfg: &ExperimentConfig, points: PointSet, spec: KernelSpec, c: &StageCounters) -> Result<Self> {
        let bc = cfg.build_config();
        Ok(match cfg.method {
            Method::ParamH => Prepared::H(Box::new(ParametricHMatrix::build(points, spec, bc, &c.offline)?)),
            Method::ParamH2 => Prepared::H2(Box::new(ParametricH2Matrix::build(points, spec, bc, &c.offline)?)),
            Method::HAca => Prepared::Aca(Box::new(Some(Structure::new(points, spec, bc)?))),
            Method::H2Hca => {
                let st = Structure::new(points, spec, bc)?;
                let basis = H2Basis::build(&st)?;
                Prepared::Hca(Box::new(Some((st, basis))))
            }
        })
    }

    fn online(
        &mut self,
        theta: &[f64],
        x: &[f64],
        repeats: usize,
        c: &StageCounters,
        metrics: &mut Vec<MatrixMetrics>,
    ) -> Result<Online> {
        match self {
            Prepared::H(p) => {
                let vs = p.structure.parametric_vectors(theta)?;
                let (near, nf) = timed_median(repeats, || Ok(p.online_near(theta, &vs, &c.online)?))?;
                let (h, ff) = timed_median(repeats, || Ok(p.online_far(&vs)?))?;
                let inst = InstantiatedHMatrix { param: p, theta: theta.to_vec(), h, near };
                let (y, mvm) = timed(|| Ok(inst.mvm(x)?))?;
                Ok(Online { nf, ff, mvm, y })
            }
            Prepared::H2(p) => {
                let vs = p.structure.parametric_vectors(theta)?;
                let (near, nf) = timed_median(repeats, || Ok(p.online_near(theta, &vs, &c.online)?))?;
                let (h, ff) = timed_median(repeats, || Ok(p.online_far(&vs)?))?;
                let inst = InstantiatedH2Matrix { param: p, theta: theta.to_vec(), h, near };
                let (y, mvm) = timed(|| Ok(inst.mvm(x)?))?;
                Ok(Online { nf, ff, mvm, y })
            }
            Prepared::Aca(slot) => {
                let st = slot.take().expect("structure present");
                let (near, nf) = timed_median(repeats, || Ok(dense_near_blocks(&st, theta, &c.baseline)?))?;
                let (far, ff) = timed_median(repeats, || Ok(aca_far_blocks(&st, theta, &c.baseline)?))?;
                let m = HAca { structure: st, theta: theta.to_vec(), far, near };
                let (y, mvm) = timed(|| Ok(m.mvm(x)?))?;
                metrics.push(m.metrics());
                **slot = Some(m.structure);
                Ok(Online { nf, ff, mvm, y })
            }
            Prepared::Hca(slot) => {
                let (st, basis) = slot.take().expect("structure present");
                let (near, nf) = timed_median(repeats, || Ok(dense_near_blocks(&st, theta, &c.baseline)?))?;
                let (couplings, ff) = timed_median(repeats, || Ok(hca_couplings(&st, theta, &c.baseline)?))?;
                let m = H2Hca { structure: st, basis, theta: theta.to_vec(), couplings, near };
                let (y, mvm) = timed(|| Ok(m.mvm(x)?))?;
                metrics.push(m.metrics());
                **slot = Some((m.structure, m.basis));
                Ok(Online { nf, ff, mvm, y })
            }
        }
    }

    fn metrics(&self, per_theta: &[MatrixMetrics]) -> MatrixMetrics {
        match self {
            Prepared::H(p) => p.metrics(),
            Prepared::H2(p) => p.metrics(),
            _ => average(per_theta),
        }
    }
}

/// Offline build, sampled online loop, error estimate and metrics.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunReport> {
    cfg.validate()?;
    let counters = StageCounters::default();
    let spec = cfg.kernel_spec()?;
    let points = generate_points(cfg.n, cfg.d, cfg.seed)?;
    let protocol = ErrorProtocol::new(&spec, cfg.n, cfg.n_rows, cfg.n_theta, cfg.seed);

    let exact = protocol
        .thetas
        .iter()
        .map(|t| protocol.exact(&spec, &points, t, &counters.audit))
        .collect::<Result<Vec<_>>>()?;

    let (mut prepared, offline_time) = timed(|| Prepared::offline(cfg, points, spec.clone(), &counters))?;

    let mut samples = Vec::with_capacity(protocol.thetas.len());
    let mut approx = Vec::with_capacity(protocol.thetas.len());
    let mut per_theta = Vec::new();
    for theta in &protocol.thetas {
        let on = prepared.online(theta, &protocol.x, cfg.repeats, &counters, &mut per_theta)?;
        let yj = protocol.restrict(&on.y);
        let err = relative_error(&exact[samples.len()], &yj);
        samples.push(ThetaSample { theta: theta.clone(), nf_time: on.nf, ff_time: on.ff, mvm_time: on.mvm, error: err });
        approx.push(yj);
    }
    let m = prepared.metrics(&per_theta);
    let k = samples.len().max(1) as f64;
    let nf_time = samples.iter().map(|s| s.nf_time).sum::<f64>() / k;
    let ff_time = samples.iter().map(|s| s.ff_time).sum::<f64>() / k;
    let record = MetricsRecord {
        kernel: spec.family.id().to_string(),
        n: cfg.n,
        method: cfg.method.id().to_string(),
        storage_gb: m.storage_gb(),
        offline_time,
        nf_time,
        ff_time,
        online_time: nf_time + ff_time,
        nf_ratio: m.nf_ratio(),
        ff_ratio: m.ff_ratio(),
        coupling_ratio: m.coupling_ratio(),
        rank: m.rank,
        mvm_time: samples.iter().map(|s| s.mvm_time).sum::<f64>() / k,
        error: estimate_error(&exact, &approx),
        offline_evals: counters.offline.get(),
        online_evals: counters.online.get(),
        baseline_evals: counters.baseline.get(),
        audit_evals: counters.audit.get(),
        c_sp: m.c_sp,
        m_a: m.m_a,
        far_blocks: m.n_far,
        near_blocks: m.n_near,
        storage_entries: m.storage_entries,
        nf_entries: m.nf_entries,
        ff_entries: m.ff_entries,
        coupling_entries: m.coupling_entries,
    };
    Ok(RunReport { config: cfg.to_kv(), record, samples })
}
