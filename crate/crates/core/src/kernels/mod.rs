//! Squared-exponential latent covariances and their integrals over supports.

mod histogram;
mod integrals;
mod support;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use histogram::{support_cov_bucketed, support_cov_grid, DistanceHistogram};
pub use integrals::{double_integral_interval, integral_point_interval};
pub use support::{PairCov, ResolvedSupport};

/// `exp(-|x - x'|^2 / (2 beta^2))` with unit signal variance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SEKernel {
    pub log_beta: f64,
}

impl SEKernel {
    /// Signal variance; the column scale of the mixing weights carries the amplitude.
    pub const ALPHA2: f64 = 1.0;

    pub fn new(beta: f64) -> Self {
        SEKernel { log_beta: beta.ln() }
    }

    pub fn from_log_beta(log_beta: f64) -> Self {
        SEKernel { log_beta }
    }

    pub fn beta(&self) -> f64 {
        self.log_beta.exp()
    }

    pub fn is_valid(&self) -> bool {
        let b = self.beta();
        b.is_finite() && b > 0.0
    }

    /// Covariance as a function of squared distance.
    #[inline]
    pub fn of_sq_dist(&self, d2: f64) -> f64 {
        let b = self.beta();
        Self::ALPHA2 * (-d2 / (2.0 * b * b)).exp()
    }

    /// Value and derivative with respect to `log_beta`.
    #[inline]
    pub fn of_sq_dist_dlogbeta(&self, d2: f64) -> (f64, f64) {
        let b2 = self.beta().powi(2);
        let v = Self::ALPHA2 * (-d2 / (2.0 * b2)).exp();
        (v, v * d2 / b2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KernelSet {
    pub kernels: Vec<SEKernel>,
}

impl KernelSet {
    pub fn new(kernels: Vec<SEKernel>) -> Result<Self> {
        if kernels.is_empty() {
            return Err(Error::InvalidConfig("at least one latent kernel is required".into()));
        }
        Ok(KernelSet { kernels })
    }

    /// `count` kernels around `base_beta`, staggered linearly over +-10%.
    pub fn staggered(base_beta: f64, count: usize) -> Result<Self> {
        let kernels = (0..count)
            .map(|l| {
                let t = if count > 1 { l as f64 / (count - 1) as f64 } else { 0.5 };
                SEKernel::new(base_beta * (0.9 + 0.2 * t))
            })
            .collect();
        KernelSet::new(kernels)
    }

    pub fn len(&self) -> usize {
        self.kernels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }
}

pub(crate) fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Point-to-point covariance.
pub fn eval(kernel: &SEKernel, x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), actual: y.len() });
    }
    Ok(kernel.of_sq_dist(sq_dist(x, y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;

    #[test]
    fn eval_identity_and_closed_form() {
        let k = SEKernel::new(1.0);
        assert_eq!(eval(&k, &[0.3, -2.0], &[0.3, -2.0]).unwrap(), 1.0);
        assert!((eval(&k, &[0.0], &[1.0]).unwrap() - 0.6065306597126334).abs() < 1e-12);
        let k2 = SEKernel::new(2.0);
        assert!((eval(&k2, &[0.0, 0.0], &[0.0, 2.0]).unwrap() - 0.6065306597126334).abs() < 1e-12);
        assert_eq!(eval(&k, &[0.0], &[0.0, 1.0]), Err(Error::DimensionMismatch { expected: 1, actual: 2 }));
    }

    #[test]
    fn stagger_is_symmetric_about_base() {
        let ks = KernelSet::staggered(0.2, 3).unwrap();
        let betas: Vec<f64> = ks.kernels.iter().map(|k| k.beta()).collect();
        assert!((betas[0] - 0.18).abs() < 1e-12);
        assert!((betas[1] - 0.2).abs() < 1e-12);
        assert!((betas[2] - 0.22).abs() < 1e-12);
        assert!((KernelSet::staggered(0.2, 1).unwrap().kernels[0].beta() - 0.2).abs() < 1e-12);
        assert!(KernelSet::new(vec![]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn eval_symmetric(x in proptest::collection::vec(-5.0f64..5.0, 2), y in proptest::collection::vec(-5.0f64..5.0, 2), lb in -3.0f64..2.0) {
            let k = SEKernel::from_log_beta(lb);
            let a = eval(&k, &x, &y).unwrap();
            proptest::prop_assert_eq!(a, eval(&k, &y, &x).unwrap());
            proptest::prop_assert!((0.0..=1.0).contains(&a));
        }

        #[test]
        fn gram_is_psd(pts in proptest::collection::vec(proptest::collection::vec(-3.0f64..3.0, 2), 2..12), lb in -2.0f64..1.0) {
            let k = SEKernel::from_log_beta(lb);
            let n = pts.len();
            let g = DMatrix::from_fn(n, n, |i, j| eval(&k, &pts[i], &pts[j]).unwrap());
            let min_eig = g.symmetric_eigenvalues().min();
            proptest::prop_assert!(min_eig >= -1e-10, "min eigenvalue {}", min_eig);
        }
    }
}
