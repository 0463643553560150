//! Special functions, quadrature rules and combinatorial helpers.
//!
//! The normal CDF goes through `libm::erfc` (a few ulp on the whole line),
//! incomplete gamma ratios through `statrs`, Gauss rules through `gauss-quad`
//! and adaptive integration through the double-exponential rule of
//! `quadrature`.

use std::f64::consts::{PI, SQRT_2};

use gauss_quad::{FiniteAboveNegOneF64, GaussHermite, GaussLaguerre};
use statrs::function::erf::erfc_inv;
use statrs::function::gamma::{gamma_lr, gamma_ur, ln_gamma};

use crate::error::{Error, Result};

/// `1/sqrt(2 pi)`.
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// `sqrt(2/pi)`, the Lipschitz constant of the normal Stein solution.
pub const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// Standard normal quantile, refined by one Newton step.
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = -SQRT_2 * erfc_inv(2.0 * p);
    let d = normal_pdf(x);
    if d > 0.0 {
        x - (normal_cdf(x) - p) / d
    } else {
        x
    }
}

/// `int_{-inf}^x Phi(t) dt = x Phi(x) + phi(x)`.
pub fn normal_cdf_integral(x: f64) -> f64 {
    if x == f64::NEG_INFINITY {
        return 0.0;
    }
    x * normal_cdf(x) + normal_pdf(x)
}

/// Regularized lower incomplete gamma `P(a, x)`.
pub fn gamma_p(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        0.0
    } else if x.is_infinite() {
        1.0
    } else {
        gamma_lr(a, x)
    }
}

/// Regularized upper incomplete gamma `Q(a, x)`.
pub fn gamma_q(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        1.0
    } else if x.is_infinite() {
        0.0
    } else {
        gamma_ur(a, x)
    }
}

/// CDF of the centered Gamma law `2X - nu`, `X ~ Gamma(nu/2, 1)`.
pub fn centered_gamma_cdf(z: f64, nu: f64) -> f64 {
    gamma_p(0.5 * nu, 0.5 * (z + nu))
}

/// Density of the centered Gamma law.
pub fn centered_gamma_pdf(z: f64, nu: f64) -> f64 {
    let x = 0.5 * (z + nu);
    if x <= 0.0 {
        return 0.0;
    }
    let k = 0.5 * nu;
    0.5 * ((k - 1.0) * x.ln() - x - ln_gamma(k)).exp()
}

/// `int_{-inf}^z G(s) ds` for the centered Gamma CDF `G`.
pub fn centered_gamma_cdf_integral(z: f64, nu: f64) -> f64 {
    let x = 0.5 * (z + nu);
    if x <= 0.0 {
        return 0.0;
    }
    let k = 0.5 * nu;
    (2.0 * (x * gamma_p(k, x) - k * gamma_p(k + 1.0, x))).max(0.0)
}

/// `int_z^inf (1 - G(s)) ds` for the centered Gamma CDF `G`.
pub fn centered_gamma_sf_integral(z: f64, nu: f64) -> f64 {
    let x = 0.5 * (z + nu);
    if x <= 0.0 {
        return -z;
    }
    let k = 0.5 * nu;
    (2.0 * (k * gamma_q(k + 1.0, x) - x * gamma_q(k, x))).max(0.0)
}

/// Quantile of the centered Gamma law by safeguarded Newton iteration.
pub fn centered_gamma_quantile(p: f64, nu: f64) -> f64 {
    if p <= 0.0 {
        return -nu;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let mut lo = -nu;
    let mut hi = nu.max(1.0);
    while centered_gamma_cdf(hi, nu) < p {
        hi = 2.0 * hi + nu;
    }
    let mut z = 0.5 * (lo + hi);
    for _ in 0..200 {
        let f = centered_gamma_cdf(z, nu) - p;
        if f.abs() < 1e-15 {
            break;
        }
        if f > 0.0 {
            hi = z;
        } else {
            lo = z;
        }
        let d = centered_gamma_pdf(z, nu);
        let newton = if d > 0.0 { z - f / d } else { f64::NAN };
        z = if newton > lo && newton < hi { newton } else { 0.5 * (lo + hi) };
        if hi - lo < 1e-15 * (1.0 + z.abs()) {
            break;
        }
    }
    z
}

/// Adaptive double-exponential quadrature on a finite interval, bisecting
/// where the rule does not converge (kinks of the integrand).
pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> Result<f64> {
    integrate_rec(&f, a, b, tol, 0)
}

fn integrate_rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> Result<f64> {
    if a == b {
        return Ok(0.0);
    }
    let out = quadrature::double_exponential::integrate(f, a, b, tol);
    if !out.integral.is_finite() {
        return Err(Error::Numerical(format!("quadrature on [{a}, {b}] returned a non-finite value")));
    }
    if out.error_estimate <= 1e3 * tol.max(1e-15) * (1.0 + out.integral.abs()) {
        return Ok(out.integral);
    }
    if depth >= 40 {
        return Err(Error::Numerical(format!(
            "quadrature on [{a}, {b}] did not converge (error estimate {:e})",
            out.error_estimate
        )));
    }
    let mid = 0.5 * (a + b);
    Ok(integrate_rec(f, a, mid, tol, depth + 1)? + integrate_rec(f, mid, b, tol, depth + 1)?)
}

const GAUSS_BREAKS: [f64; 13] = [-40.0, -12.0, -6.0, -3.0, -1.5, -0.5, 0.0, 0.5, 1.5, 3.0, 6.0, 12.0, 40.0];

/// `E[h(Z)]` for standard normal `Z`, by adaptive quadrature on a fixed
/// partition of `[-40, 40]` (robust to a kink at the origin).
pub fn gaussian_expectation<F: Fn(f64) -> f64>(h: F) -> Result<f64> {
    let mut total = 0.0;
    for w in GAUSS_BREAKS.windows(2) {
        total += integrate(|t| h(t) * normal_pdf(t), w[0], w[1], 1e-13)?;
    }
    Ok(total)
}

/// `E[h(Z)]` for standard normal `Z` by the 128-node Gauss-Hermite rule.
pub fn gaussian_expectation_gh<F: Fn(f64) -> f64>(h: F) -> f64 {
    let rule = GaussHermite::new(128.try_into().expect("nonzero"));
    rule.iter().map(|(x, w)| w * h(SQRT_2 * x)).sum::<f64>() / PI.sqrt()
}

/// `E[h(Z_nu)]` for the centered Gamma law by 128-node generalized
/// Gauss-Laguerre quadrature.
pub fn centered_gamma_expectation<F: Fn(f64) -> f64>(h: F, nu: f64) -> Result<f64> {
    let alpha = FiniteAboveNegOneF64::new(0.5 * nu - 1.0)
        .ok_or_else(|| Error::Invalid(format!("nu = {nu} must be positive")))?;
    let rule = GaussLaguerre::new(128.try_into().expect("nonzero"), alpha);
    let norm = ln_gamma(0.5 * nu).exp();
    Ok(rule.iter().map(|(x, w)| w * h(2.0 * x - nu)).sum::<f64>() / norm)
}

/// Exact binomial coefficient in `u128`, `None` on overflow.
pub fn binomial_exact(n: u64, k: u64) -> Option<u128> {
    if k > n {
        return Some(0);
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc.checked_mul((n - i) as u128)? / (i as u128 + 1);
    }
    Some(acc)
}

/// Binomial coefficient as a float; exact while it fits in `u128`.
pub fn binomial(n: u64, k: u64) -> f64 {
    match binomial_exact(n, k) {
        Some(v) => v as f64,
        None => (ln_gamma(n as f64 + 1.0) - ln_gamma(k as f64 + 1.0) - ln_gamma((n - k) as f64 + 1.0)).exp(),
    }
}

/// Exact factorial in `u128`, `None` on overflow.
pub fn factorial_exact(n: u64) -> Option<u128> {
    (1..=n as u128).try_fold(1u128, |acc, i| acc.checked_mul(i))
}

/// `n!` as a float.
pub fn factorial(n: u64) -> f64 {
    match factorial_exact(n) {
        Some(v) => v as f64,
        None => ln_gamma(n as f64 + 1.0).exp(),
    }
}

/// Square root that clamps radicands in `[-1e-10, 0)` to zero and rejects
/// anything more negative.
pub fn guarded_sqrt(x: f64, what: &str) -> Result<f64> {
    if x >= 0.0 {
        Ok(x.sqrt())
    } else if x >= -1e-10 {
        Ok(0.0)
    } else {
        Err(Error::Numerical(format!("negative radicand {x:e} in {what}")))
    }
}

/// Same clamping rule for fourth roots.
pub fn guarded_root4(x: f64, what: &str) -> Result<f64> {
    guarded_sqrt(x, what).map(f64::sqrt)
}

#[cfg(test)]
mod tests {
    use super::*;

    // Reference values from 40-digit arithmetic.
    const PHI_REF: [(f64, f64); 8] = [
        (-8.0, 6.220960574271784123515995e-16),
        (-5.0, 2.866515718791939116737523e-7),
        (-3.3, 4.834241423837772011101081e-4),
        (-1.0, 0.1586552539314570514147675),
        (-0.1, 0.4601721627229710185345954),
        (0.7, 0.7580363477769269852506496),
        (2.0, 0.9772498680518207927997174),
        (4.4, 0.9999945874560922961401581),
    ];

    #[test]
    fn normal_cdf_matches_high_precision_reference() {
        for (x, r) in PHI_REF {
            assert!((normal_cdf(x) - r).abs() <= 1e-13, "x = {x}");
        }
        let mut x = -8.0;
        while x <= 8.0 {
            assert!((normal_cdf(x) + normal_cdf(-x) - 1.0).abs() < 1e-15);
            x += 0.01;
        }
    }

    #[test]
    fn normal_quantile_inverts_cdf() {
        for &p in &[1e-12, 1e-6, 0.01, 0.3, 0.5, 0.77, 0.999_999] {
            let x = normal_quantile(p);
            assert!((normal_cdf(x) - p).abs() <= 1e-15 * (1.0 + 1.0 / p.min(1.0 - p)) * p.min(1.0 - p) + 1e-17);
        }
    }

    #[test]
    fn cdf_integral_is_antiderivative() {
        for &x in &[-3.0, -0.5, 0.0, 1.2, 4.0] {
            let num = integrate(normal_cdf, -40.0, x, 1e-14).unwrap();
            assert!((num - normal_cdf_integral(x)).abs() < 1e-12);
        }
    }

    #[test]
    fn centered_gamma_nu_two_is_shifted_exponential() {
        for &z in &[-1.9f64, -1.0, 0.0, 0.5, 3.0, 10.0] {
            let exact = 1.0 - (-(z + 2.0) / 2.0).exp();
            assert!((centered_gamma_cdf(z, 2.0) - exact).abs() < 1e-14);
            let q = centered_gamma_quantile(exact, 2.0);
            assert!((q - z).abs() < 1e-10);
        }
    }

    #[test]
    fn centered_gamma_integrals_agree_with_quadrature() {
        for &nu in &[0.7, 2.0, 5.0] {
            for &z in &[-0.3, 0.4, 2.5] {
                let lo = integrate(|s| centered_gamma_cdf(s, nu), -nu, z, 1e-13).unwrap();
                assert!((lo - centered_gamma_cdf_integral(z, nu)).abs() < 1e-10);
                let hi = integrate(|s| 1.0 - centered_gamma_cdf(s, nu), z, z + 200.0, 1e-13).unwrap();
                assert!((hi - centered_gamma_sf_integral(z, nu)).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gauss_rules_integrate_moments() {
        assert!((gaussian_expectation_gh(|x| x * x) - 1.0).abs() < 1e-13);
        assert!((gaussian_expectation_gh(|x| x.powi(4)) - 3.0).abs() < 1e-12);
        assert!((gaussian_expectation(f64::abs).unwrap() - SQRT_2_OVER_PI).abs() < 1e-13);
        let nu = 3.0;
        assert!(centered_gamma_expectation(|z| z, nu).unwrap().abs() < 1e-12);
        assert!((centered_gamma_expectation(|z| z * z, nu).unwrap() - 2.0 * nu).abs() < 1e-10);
    }

    #[test]
    fn combinatorics() {
        assert_eq!(binomial_exact(10, 3), Some(120));
        assert_eq!(binomial(5, 7), 0.0);
        assert_eq!(factorial_exact(5), Some(120));
        assert!((binomial(200, 100) / 9.054_851_465_610_328e58 - 1.0).abs() < 1e-10);
    }

    #[test]
    fn guarded_roots() {
        assert_eq!(guarded_sqrt(-1e-12, "t").unwrap(), 0.0);
        assert!(guarded_sqrt(-1e-6, "t").is_err());
        assert!((guarded_root4(16.0, "t").unwrap() - 2.0).abs() < 1e-15);
    }
}
