//! Modified Bessel function of the second kind for real order.
//!
//! Temme's series for small arguments, Steed's continued fraction for
//! large ones, then forward recurrence in the order.

use core::f64::consts::PI;

// Taylor coefficients of 1/Gamma(z) around 0 (Abramowitz & Stegun 6.1.34).
const RGAMMA: [f64; 26] = [
    1.0,
    0.577_215_664_901_532_9,
    -0.655_878_071_520_253_8,
    -0.042_002_635_034_095_2,
    0.166_538_611_382_291_5,
    -0.042_197_734_555_544_3,
    -0.009_621_971_527_877_0,
    0.007_218_943_246_663_0,
    -0.001_165_167_591_859_1,
    -0.000_215_241_674_114_9,
    0.000_128_050_282_388_2,
    -0.000_020_134_854_780_7,
    -0.000_001_250_493_482_1,
    0.000_001_133_027_232_0,
    -0.000_000_205_633_841_7,
    0.000_000_006_116_095_0,
    0.000_000_005_002_007_5,
    -0.000_000_001_181_274_6,
    0.000_000_000_104_342_7,
    0.000_000_000_007_782_3,
    -0.000_000_000_003_696_8,
    0.000_000_000_000_510_0,
    -0.000_000_000_000_020_6,
    -0.000_000_000_000_005_4,
    0.000_000_000_000_001_4,
    0.000_000_000_000_000_1,
];

/// Returns (gam1, gam2, 1/Gamma(1+mu), 1/Gamma(1-mu)) for |mu| <= 1/2.
fn temme_gammas(mu: f64) -> (f64, f64, f64, f64) {
    // 1/Gamma(1+mu) = sum_k c_{k+1} mu^k
    let mut even = 0.0; // sum over odd k+1 (even powers)
    let mut odd = 0.0; // sum over even k+1 (odd powers), divided by mu
    let mu2 = mu * mu;
    let mut pw = 1.0;
    for k in 0..13 {
        even += RGAMMA[2 * k] * pw;
        odd += RGAMMA[2 * k + 1] * pw;
        pw *= mu2;
    }
    let gampl = even + mu * odd;
    let gammi = even - mu * odd;
    (-odd, even, gampl, gammi)
}

/// K_nu(x) for nu >= 0 and x > 0.
pub fn bessel_k(nu: f64, x: f64) -> f64 {
    debug_assert!(nu >= 0.0 && x > 0.0);
    const EPS: f64 = 1e-17;
    const FPMIN: f64 = 1e-300;
    let nl = libm::floor(nu + 0.5) as i64;
    let xmu = nu - nl as f64;
    let xmu2 = xmu * xmu;
    let xi = 1.0 / x;
    let xi2 = 2.0 * xi;
    let (mut rkmu, mut rk1);
    if x < 2.0 {
        let x2 = 0.5 * x;
        let pimu = PI * xmu;
        let fact = if libm::fabs(pimu) < EPS { 1.0 } else { pimu / libm::sin(pimu) };
        let d = -libm::log(x2);
        let e = xmu * d;
        let fact2 = if libm::fabs(e) < EPS { 1.0 } else { libm::sinh(e) / e };
        let (gam1, gam2, gampl, gammi) = temme_gammas(xmu);
        let mut ff = fact * (gam1 * libm::cosh(e) + gam2 * fact2 * d);
        let mut sum = ff;
        let ee = libm::exp(e);
        let mut p = 0.5 * ee / gampl;
        let mut q = 0.5 / (ee * gammi);
        let mut c = 1.0;
        let dd = x2 * x2;
        let mut sum1 = p;
        let mut i = 1.0;
        loop {
            ff = (i * ff + p + q) / (i * i - xmu2);
            c *= dd / i;
            p /= i - xmu;
            q /= i + xmu;
            let del = c * ff;
            sum += del;
            sum1 += c * (p - i * ff);
            if libm::fabs(del) < libm::fabs(sum) * EPS || i > 500.0 {
                break;
            }
            i += 1.0;
        }
        rkmu = sum;
        rk1 = sum1 * xi2;
    } else {
        let mut b = 2.0 * (1.0 + x);
        let mut d = 1.0 / b;
        let mut h = d;
        let mut delh = d;
        let mut q1 = 0.0;
        let mut q2 = 1.0;
        let a1 = 0.25 - xmu2;
        let mut q = a1;
        let mut c = a1;
        let mut a = -a1;
        let mut s = 1.0 + q * delh;
        let mut i = 1.0;
        loop {
            a -= 2.0 * i;
            c = -a * c / (i + 1.0);
            let qnew = (q1 - b * q2) / a;
            q1 = q2;
            q2 = qnew;
            q += c * qnew;
            b += 2.0;
            d = 1.0 / (b + a * d);
            if libm::fabs(d) < FPMIN {
                d = FPMIN;
            }
            delh = (b * d - 1.0) * delh;
            h += delh;
            let dels = q * delh;
            s += dels;
            if libm::fabs(dels / s) < EPS || i > 5000.0 {
                break;
            }
            i += 1.0;
        }
        h *= a1;
        rkmu = libm::sqrt(PI / (2.0 * x)) * libm::exp(-x) / s;
        rk1 = rkmu * (xmu + x + 0.5 - h) * xi;
    }
    for i in 1..=nl {
        let t = (xmu + i as f64) * xi2 * rk1 + rkmu;
        rkmu = rk1;
        rk1 = t;
    }
    rkmu
}

/// Gamma function.
pub fn gamma(x: f64) -> f64 {
    libm::tgamma(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k_half(z: f64) -> f64 {
        libm::sqrt(PI / (2.0 * z)) * libm::exp(-z)
    }

    fn k_three_halves(z: f64) -> f64 {
        k_half(z) * (1.0 + 1.0 / z)
    }

    // K_nu(z) = int_0^inf exp(-z cosh t) cosh(nu t) dt, trapezoid rule.
    fn k_quadrature(nu: f64, z: f64) -> f64 {
        let h = 1.0 / 256.0;
        let mut sum = 0.5 * libm::exp(-z);
        let mut t = h;
        loop {
            let term = libm::exp(-z * libm::cosh(t) + nu * t) * 0.5
                + libm::exp(-z * libm::cosh(t) - nu * t) * 0.5;
            sum += term;
            if term < 1e-30 * sum {
                break;
            }
            t += h;
        }
        sum * h
    }

    fn rel(a: f64, b: f64) -> f64 {
        libm::fabs(a - b) / libm::fabs(b)
    }

    #[test]
    fn closed_forms() {
        let mut z = 1e-6;
        while z <= 50.0 {
            assert!(rel(bessel_k(0.5, z), k_half(z)) < 1e-12, "nu=1/2 z={z}");
            assert!(rel(bessel_k(1.5, z), k_three_halves(z)) < 1e-12, "nu=3/2 z={z}");
            z *= 1.37;
        }
    }

    #[test]
    fn quadrature_oracle() {
        for &nu in &[0.5, 0.7, 1.0, 1.3, 2.0, 2.5, 2.9, 3.0] {
            for &z in &[0.01, 0.3, 1.0, 1.99, 2.0, 2.01, 5.0, 17.0, 40.0] {
                let a = bessel_k(nu, z);
                let b = k_quadrature(nu, z);
                assert!(rel(a, b) < 1e-12, "nu={nu} z={z} {a} {b}");
            }
        }
    }

    #[test]
    fn temme_gammas_match_tgamma() {
        for &mu in &[-0.5, -0.3, -0.01, 0.0, 1e-9, 0.2, 0.5] {
            let (_, _, gp, gm) = temme_gammas(mu);
            assert!(libm::fabs(gp - 1.0 / libm::tgamma(1.0 + mu)) < 1e-15);
            assert!(libm::fabs(gm - 1.0 / libm::tgamma(1.0 - mu)) < 1e-15);
        }
    }
}
