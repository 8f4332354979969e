//! One-dimensional closed forms of the SE kernel integrated over intervals.
//!
//! With `phi(u) = exp(-u^2 / 2b^2)`:
//! `Phi(u) = int_0^u phi = b sqrt(pi/2) erf(u / (sqrt(2) b))` and
//! `Psi(u) = int_0^u Phi = u Phi(u) + b^2 (phi(u) - 1)`, so that
//! `int_a^b int_c^d phi(x - y) dy dx = Psi(b-c) - Psi(b-d) - Psi(a-c) + Psi(a-d)`.
//! When all four arguments share a sign the linear parts of `Psi` cancel
//! exactly and the erfc tail form is used instead.

use std::f64::consts::{FRAC_PI_2, SQRT_2};

use libm::{erf, erfc};

use super::SEKernel;
use crate::error::{Error, Result};

fn check_interval(lo: f64, hi: f64) -> Result<()> {
    if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
        return Err(Error::DegenerateInterval { lo, hi });
    }
    Ok(())
}

/// `int_lo^hi phi(y - x) dy`, evaluated without cancellation in the tails.
fn phi_integral(beta: f64, x: f64, lo: f64, hi: f64) -> f64 {
    let c = beta * FRAC_PI_2.sqrt();
    let s = SQRT_2 * beta;
    let (za, zb) = ((lo - x) / s, (hi - x) / s);
    if za >= 0.0 {
        c * (erfc(za) - erfc(zb))
    } else if zb <= 0.0 {
        c * (erfc(-zb) - erfc(-za))
    } else {
        c * (erf(zb) - erf(za))
    }
}

/// `int_a^b exp(-(x - y)^2 / 2 beta^2) dy`.
pub fn integral_point_interval(kernel: &SEKernel, x: f64, a: f64, b: f64) -> Result<f64> {
    check_interval(a, b)?;
    Ok(SEKernel::ALPHA2 * phi_integral(kernel.beta(), x, a, b))
}

/// Value and `log_beta` derivative of [`integral_point_interval`]; interval assumed valid.
///
/// Uses `beta dPhi/dbeta = Phi(u) - u phi(u)`.
pub(crate) fn phi_point_interval_parts(kernel: &SEKernel, x: f64, a: f64, b: f64) -> (f64, f64) {
    let beta = kernel.beta();
    let phi = |u: f64| (-u * u / (2.0 * beta * beta)).exp();
    let value = phi_integral(beta, x, a, b);
    let grad = value - ((b - x) * phi(b - x) - (a - x) * phi(a - x));
    (SEKernel::ALPHA2 * value, SEKernel::ALPHA2 * grad)
}

fn corners(a: f64, b: f64, c: f64, d: f64) -> [(f64, f64); 4] {
    [(b - c, 1.0), (b - d, -1.0), (a - c, -1.0), (a - d, 1.0)]
}

fn same_sign(us: &[(f64, f64); 4]) -> bool {
    us.iter().all(|&(u, _)| u >= 0.0) || us.iter().all(|&(u, _)| u <= 0.0)
}

/// `Psi` and `dPsi/dlog(beta)` without their constant parts (they cancel in the sum).
fn psi_general(beta: f64, u: f64) -> (f64, f64) {
    let b2 = beta * beta;
    let e = (-u * u / (2.0 * b2)).exp_m1();
    let phi_int = beta * FRAC_PI_2.sqrt() * erf(u / (SQRT_2 * beta));
    (u * phi_int + b2 * e, u * phi_int + 2.0 * b2 * e)
}

/// Tail form of `Psi` for arguments of one sign, with the linear part removed.
fn psi_tail(beta: f64, u: f64) -> (f64, f64) {
    let b2 = beta * beta;
    let au = u.abs();
    let phi = (-u * u / (2.0 * b2)).exp();
    let lin = au * beta * FRAC_PI_2.sqrt() * erfc(au / (SQRT_2 * beta));
    (b2 * phi - lin, 2.0 * b2 * phi - lin)
}

fn double_integral_parts(beta: f64, a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let us = corners(a, b, c, d);
    let psi = if same_sign(&us) { psi_tail } else { psi_general };
    us.iter().fold((0.0, 0.0), |(v, g), &(u, sign)| {
        let (pv, pg) = psi(beta, u);
        (v + sign * pv, g + sign * pg)
    })
}

/// `int_a^b int_c^d exp(-(x - y)^2 / 2 beta^2) dy dx`.
pub fn double_integral_interval(kernel: &SEKernel, a: f64, b: f64, c: f64, d: f64) -> Result<f64> {
    check_interval(a, b)?;
    check_interval(c, d)?;
    Ok(SEKernel::ALPHA2 * double_integral_parts(kernel.beta(), a, b, c, d).0)
}

/// Value and `log_beta` derivative of [`double_integral_interval`]; intervals assumed valid.
pub(crate) fn psi_pair(kernel: &SEKernel, a: f64, b: f64, c: f64, d: f64) -> (f64, f64) {
    let (v, g) = double_integral_parts(kernel.beta(), a, b, c, d);
    (SEKernel::ALPHA2 * v, SEKernel::ALPHA2 * g)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Adaptive Simpson quadrature; test oracle only.
    fn simpson<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64) -> f64 {
        #[allow(clippy::too_many_arguments)]
        fn rec<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
            let m = 0.5 * (a + b);
            let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
            let (flm, frm) = (f(lm), f(rm));
            let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
            let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
            if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
                left + right + (left + right - whole) / 15.0
            } else {
                rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1) + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
            }
        }
        let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
        let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
        rec(f, a, b, fa, fm, fb, whole, tol, 40)
    }

    #[test]
    fn point_interval_matches_gaussian_mass() {
        let k = SEKernel::new(1.0);
        let v = integral_point_interval(&k, 0.0, -50.0, 50.0).unwrap();
        assert!((v - 2.5066282746310002).abs() < 1e-10);
    }

    #[test]
    fn point_interval_flat_limit() {
        let k = SEKernel::new(1e6);
        let v = integral_point_interval(&k, 0.5, 0.0, 1.0).unwrap();
        assert!((v - 1.0).abs() < 1e-6);
    }

    #[test]
    fn degenerate_intervals_rejected() {
        let k = SEKernel::new(1.0);
        assert_eq!(integral_point_interval(&k, 0.0, 1.0, 1.0), Err(Error::DegenerateInterval { lo: 1.0, hi: 1.0 }));
        assert!(double_integral_interval(&k, 0.0, 1.0, 2.0, 2.0).is_err());
    }

    #[test]
    fn point_interval_matches_quadrature() {
        for &(beta, x, a, b) in &[(1.0, 0.3, -0.5, 2.0), (0.1, 0.0, 0.5, 0.9), (0.05, 2.0, 0.0, 1.0), (3.0, -1.0, 0.0, 10.0)] {
            let k = SEKernel::new(beta);
            let oracle = simpson(&|y: f64| k.of_sq_dist((x - y) * (x - y)), a, b, 1e-14);
            let v = integral_point_interval(&k, x, a, b).unwrap();
            assert!((v - oracle).abs() < 1e-10, "beta {beta}: {v} vs {oracle}");
            assert!(v > 0.0 && v <= b - a);
        }
    }

    #[test]
    fn double_integral_matches_nested_quadrature() {
        let cases = [
            (1.0, 0.0, 1.0, 0.0, 1.0),
            (0.3, 0.0, 0.5, 0.25, 1.0),
            (0.1, 0.0, 0.2, 0.6, 0.9),
            (2.0, -1.0, 3.0, 0.5, 0.7),
            (0.05, 0.0, 1.0, 1.0, 2.0),
        ];
        for &(beta, a, b, c, d) in &cases {
            let k = SEKernel::new(beta);
            let inner = |x: f64| integral_point_interval(&k, x, c, d).unwrap();
            let oracle = simpson(&inner, a, b, 1e-14);
            let v = double_integral_interval(&k, a, b, c, d).unwrap();
            assert!((v - oracle).abs() < 1e-10, "case {:?}: {v} vs {oracle}", (beta, a, b, c, d));
            let swapped = double_integral_interval(&k, c, d, a, b).unwrap();
            assert!((v - swapped).abs() <= 1e-15 * v.abs().max(1.0));
        }
    }

    #[test]
    fn double_integral_flat_limit() {
        let k = SEKernel::new(1e6);
        assert!((double_integral_interval(&k, 0.0, 1.0, 0.0, 1.0).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn log_beta_derivatives_match_differences() {
        let h = 1e-6;
        for &(beta, a, b, c, d) in &[(0.7, 0.0, 1.0, 0.5, 2.0), (0.2, 0.0, 0.3, 0.6, 0.8)] {
            let g = psi_pair(&SEKernel::new(beta), a, b, c, d).1;
            let plus = double_integral_interval(&SEKernel::from_log_beta(beta.ln() + h), a, b, c, d).unwrap();
            let minus = double_integral_interval(&SEKernel::from_log_beta(beta.ln() - h), a, b, c, d).unwrap();
            assert!((g - (plus - minus) / (2.0 * h)).abs() < 1e-7 * g.abs().max(1.0));

            let x = 0.4;
            let g = phi_point_interval_parts(&SEKernel::new(beta), x, a, b).1;
            let plus = integral_point_interval(&SEKernel::from_log_beta(beta.ln() + h), x, a, b).unwrap();
            let minus = integral_point_interval(&SEKernel::from_log_beta(beta.ln() - h), x, a, b).unwrap();
            assert!((g - (plus - minus) / (2.0 * h)).abs() < 1e-7 * g.abs().max(1.0));
        }
    }
}
