//! Parametric isotropic kernels `f_theta(|x - y|)` and evaluation counters.
//!
//! Every kernel has a length scale `lambda` as its first parameter. The
//! Matern family carries the smoothness `nu` as a second parameter and is
//! normalized with `Gamma(nu)` so that `nu = 1/2` reproduces the
//! exponential kernel.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;
use core::cell::Cell;
use core::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::special::{bessel_k, gamma};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KernelFamily {
    /// exp(-r/l)
    E,
    /// r^2/l^2 log(r/l)
    Tps,
    /// exp(-(r/l)^2)
    Se,
    /// sqrt(1 + (r/l)^2)
    Mc,
    /// Matern with smoothness nu
    Mn,
}

impl KernelFamily {
    pub const ALL: [KernelFamily; 5] = [Self::E, Self::Tps, Self::Se, Self::Mc, Self::Mn];

    pub fn id(self) -> &'static str {
        match self {
            Self::E => "e",
            Self::Tps => "tps",
            Self::Se => "se",
            Self::Mc => "mc",
            Self::Mn => "mn",
        }
    }

    pub fn from_id(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "e" => Ok(Self::E),
            "tps" => Ok(Self::Tps),
            "se" => Ok(Self::Se),
            "mc" => Ok(Self::Mc),
            "mn" => Ok(Self::Mn),
            other => Err(Error::Input(format!("unknown kernel id '{other}'"))),
        }
    }

    pub fn d_theta(self) -> usize {
        if self == Self::Mn {
            2
        } else {
            1
        }
    }

    /// Default parameter box: lambda in [0.25, 1], nu in [0.5, 3].
    pub fn default_theta_box(self) -> Vec<Interval> {
        let mut b = vec![Interval::new(0.25, 1.0)];
        if self == Self::Mn {
            b.push(Interval::new(0.5, 3.0));
        }
        b
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub const fn new(lo: f64, hi: f64) -> Self {
        Self { lo, hi }
    }

    pub fn contains(&self, x: f64) -> bool {
        let slack = 1e-12 * (1.0 + libm::fabs(self.lo).max(libm::fabs(self.hi)));
        x >= self.lo - slack && x <= self.hi + slack
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelSpec {
    pub family: KernelFamily,
    pub theta_box: Vec<Interval>,
}

impl KernelSpec {
    pub fn new(family: KernelFamily, theta_box: Vec<Interval>) -> Result<Self> {
        if theta_box.len() != family.d_theta() {
            return Err(Error::Input(format!(
                "kernel '{}' needs {} parameter intervals, got {}",
                family.id(),
                family.d_theta(),
                theta_box.len()
            )));
        }
        for iv in &theta_box {
            if !(iv.lo.is_finite() && iv.hi.is_finite()) || iv.lo > iv.hi {
                return Err(Error::Input(format!("invalid interval [{}, {}]", iv.lo, iv.hi)));
            }
        }
        if theta_box[0].lo <= 0.0 {
            return Err(Error::Input("length scale interval must be positive".into()));
        }
        if family == KernelFamily::Mn && theta_box[1].lo < 0.5 {
            return Err(Error::Input("Matern smoothness interval must start at >= 0.5".into()));
        }
        Ok(Self { family, theta_box })
    }

    pub fn with_default_box(family: KernelFamily) -> Self {
        Self { family, theta_box: family.default_theta_box() }
    }

    pub fn d_theta(&self) -> usize {
        self.theta_box.len()
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.d_theta() {
            return Err(Error::Dimension { expected: self.d_theta(), found: theta.len() });
        }
        for (t, iv) in theta.iter().zip(&self.theta_box) {
            if t.is_nan() {
                return Err(Error::Input("NaN parameter".into()));
            }
            if !iv.contains(*t) {
                return Err(Error::Domain(format!(
                    "parameter {t} outside [{}, {}]",
                    iv.lo, iv.hi
                )));
            }
        }
        Ok(())
    }

    /// Kernel value as a function of the distance. Unchecked and uncounted.
    #[inline]
    pub fn radial(&self, r: f64, theta: &[f64]) -> f64 {
        let s = r / theta[0];
        match self.family {
            KernelFamily::E => libm::exp(-s),
            KernelFamily::Tps => {
                if r == 0.0 {
                    0.0
                } else {
                    s * s * libm::log(s)
                }
            }
            KernelFamily::Se => libm::exp(-s * s),
            KernelFamily::Mc => libm::sqrt(1.0 + s * s),
            KernelFamily::Mn => matern(s, theta[1]),
        }
    }

    /// Checked and counted evaluation at a pair of points.
    pub fn eval(&self, x: &[f64], y: &[f64], theta: &[f64], counter: &EvalCounter) -> Result<f64> {
        if x.len() != y.len() {
            return Err(Error::Dimension { expected: x.len(), found: y.len() });
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite coordinate".into()));
        }
        self.check_theta(theta)?;
        counter.add(1);
        Ok(self.radial(distance(x, y), theta))
    }
}

/// Matern kernel in the scaled distance s = r/lambda.
fn matern(s: f64, nu: f64) -> f64 {
    let z = libm::sqrt(2.0 * nu) * s;
    if z < 1e-50 {
        return 1.0;
    }
    // 2^(1-nu)/Gamma(nu) z^nu K_nu(z), combined in log space for the prefactor
    let lpre = (1.0 - nu) * core::f64::consts::LN_2 - libm::log(gamma(nu)) + nu * libm::log(z);
    libm::exp(lpre) * bessel_k(nu, z)
}

#[inline]
pub fn distance(x: &[f64], y: &[f64]) -> f64 {
    let mut s = 0.0;
    for (a, b) in x.iter().zip(y) {
        let t = a - b;
        s += t * t;
    }
    libm::sqrt(s)
}

/// Atomic tally of scalar kernel evaluations for one stage.
#[derive(Debug, Default)]
pub struct EvalCounter(AtomicU64);

impl EvalCounter {
    pub const fn new() -> Self {
        Self(AtomicU64::new(0))
    }

    pub fn add(&self, k: u64) {
        self.0.fetch_add(k, Ordering::Relaxed);
    }

    pub fn get(&self) -> u64 {
        self.0.load(Ordering::Relaxed)
    }

    /// Only call at stage boundaries.
    pub fn reset(&self) {
        self.0.store(0, Ordering::Relaxed);
    }
}

/// One counter per stage.
#[derive(Debug, Default)]
pub struct StageCounters {
    pub offline: EvalCounter,
    pub online: EvalCounter,
    pub baseline: EvalCounter,
    pub audit: EvalCounter,
}

/// Kernel handle that tallies locally and flushes into a shared counter on drop.
pub struct CountedKernel<'a> {
    spec: &'a KernelSpec,
    counter: &'a EvalCounter,
    local: Cell<u64>,
}

impl<'a> CountedKernel<'a> {
    pub fn new(spec: &'a KernelSpec, counter: &'a EvalCounter) -> Self {
        Self { spec, counter, local: Cell::new(0) }
    }

    pub fn spec(&self) -> &KernelSpec {
        self.spec
    }

    #[inline]
    pub fn radial(&self, r: f64, theta: &[f64]) -> f64 {
        self.local.set(self.local.get() + 1);
        self.spec.radial(r, theta)
    }

    #[inline]
    pub fn eval(&self, x: &[f64], y: &[f64], theta: &[f64]) -> f64 {
        self.radial(distance(x, y), theta)
    }

    pub fn flush(&self) {
        self.counter.add(self.local.replace(0));
    }
}

impl Drop for CountedKernel<'_> {
    fn drop(&mut self) {
        self.flush();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(f: KernelFamily) -> KernelSpec {
        KernelSpec::with_default_box(f)
    }

    #[test]
    fn simple_values() {
        let c = EvalCounter::new();
        let se = spec(KernelFamily::Se);
        assert_eq!(se.eval(&[0.3, 0.2], &[0.3, 0.2], &[0.5], &c).unwrap(), 1.0);
        let e = spec(KernelFamily::E);
        let v = e.eval(&[0.0], &[0.5], &[0.5], &c).unwrap();
        assert!((v - 0.367_879_441_171_442_3).abs() < 1e-15);
        let tps = spec(KernelFamily::Tps);
        assert_eq!(tps.eval(&[0.0], &[0.5], &[0.5], &c).unwrap(), 0.0);
        assert_eq!(tps.eval(&[0.1], &[0.1], &[0.5], &c).unwrap(), 0.0);
        assert_eq!(c.get(), 4);
    }

    #[test]
    fn matern_half_is_exponential() {
        let mn = spec(KernelFamily::Mn);
        let e = spec(KernelFamily::E);
        for i in 0..40 {
            let r = 0.05 * i as f64;
            for &l in &[0.25, 0.4, 0.7, 1.0] {
                let a = mn.radial(r, &[l, 0.5]);
                let b = e.radial(r, &[l]);
                assert!((a - b).abs() < 1e-10, "r={r} l={l}");
            }
        }
    }

    #[test]
    fn matern_three_halves_closed_form() {
        let mn = spec(KernelFamily::Mn);
        for i in 1..30 {
            let r = 0.07 * i as f64;
            let l = 0.6;
            let z = libm::sqrt(3.0) * r / l;
            let want = (1.0 + z) * libm::exp(-z);
            assert!((mn.radial(r, &[l, 1.5]) - want).abs() < 1e-12);
        }
        assert_eq!(mn.radial(0.0, &[0.3, 2.2]), 1.0);
    }

    #[test]
    fn domain_and_input_errors() {
        let c = EvalCounter::new();
        let se = spec(KernelFamily::Se);
        assert!(matches!(se.eval(&[0.0], &[1.0], &[2.0], &c), Err(Error::Domain(_))));
        assert!(matches!(se.eval(&[f64::NAN], &[1.0], &[0.5], &c), Err(Error::Input(_))));
        assert_eq!(c.get(), 0);
        assert!(KernelSpec::new(KernelFamily::Mn, vec![Interval::new(0.2, 1.0), Interval::new(0.4, 2.0)]).is_err());
        assert!(KernelSpec::new(KernelFamily::E, vec![Interval::new(0.0, 1.0)]).is_err());
        assert_eq!(KernelFamily::from_id("MN").unwrap(), KernelFamily::Mn);
        assert!(KernelFamily::from_id("foo").is_err());
    }

    #[test]
    fn counted_kernel_flushes() {
        let c = EvalCounter::new();
        let s = spec(KernelFamily::Mc);
        {
            let k = CountedKernel::new(&s, &c);
            for _ in 0..7 {
                k.radial(0.1, &[0.5]);
            }
        }
        assert_eq!(c.get(), 7);
    }

    proptest! {
        #[test]
        fn symmetric_and_translation_invariant(
            x in proptest::collection::vec(-1.0f64..1.0, 3),
            y in proptest::collection::vec(-1.0f64..1.0, 3),
            shift in proptest::collection::vec(-5.0f64..5.0, 3),
            l in 0.25f64..1.0,
            nu in 0.5f64..3.0,
            fam in 0usize..5,
        ) {
            let f = KernelFamily::ALL[fam];
            let s = spec(f);
            let theta = if f == KernelFamily::Mn { vec![l, nu] } else { vec![l] };
            let c = EvalCounter::new();
            let a = s.eval(&x, &y, &theta, &c).unwrap();
            let b = s.eval(&y, &x, &theta, &c).unwrap();
            prop_assert_eq!(a, b);
            let xs: Vec<f64> = x.iter().zip(&shift).map(|(p, q)| p + q).collect();
            let ys: Vec<f64> = y.iter().zip(&shift).map(|(p, q)| p + q).collect();
            let t = s.eval(&xs, &ys, &theta, &c).unwrap();
            prop_assert!((a - t).abs() <= 1e-12 * (1.0 + a.abs()));
        }
    }
}
