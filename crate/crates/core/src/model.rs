//! The joint model: weight prior, factorized Gaussian variational posterior
//! over the mixing weights, per-domain support covariance, likelihood and KL.

use std::f64::consts::PI;
use std::ops::Range;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::data::{DomainData, TrainingData};
use crate::error::{Error, Result};
use crate::kernels::KernelSet;
use crate::rng::{NormalStream, Stream};

/// Lower bound for every variance parameter.
pub const VARIANCE_FLOOR: f64 = 1e-12;
/// First diagonal jitter, relative to the mean diagonal.
pub const JITTER_START: f64 = 1e-8;
/// Largest relative jitter tried before giving up.
pub const JITTER_MAX: f64 = 1e-4;

/// `exp(log_v)` clamped at the floor; the flag is false when clamped (zero derivative).
#[inline]
pub(crate) fn floored(log_v: f64) -> (f64, bool) {
    let lf = VARIANCE_FLOOR.ln();
    if log_v > lf {
        (log_v.exp(), true)
    } else {
        (VARIANCE_FLOOR, false)
    }
}

/// Prior over mixing weights, indexed by catalogue attribute and latent; shared across domains.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightPrior {
    pub w_bar: DMatrix<f64>,
    pub log_eta2: DMatrix<f64>,
}

/// `q(W_v)`: independent Gaussians per domain, present attribute and latent.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalWeights {
    /// Catalogue index of each row, per domain.
    pub attributes: Vec<Vec<usize>>,
    pub w_bar: Vec<DMatrix<f64>>,
    pub log_eta2: Vec<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseModel {
    /// Per domain, per present attribute.
    pub log_sigma2: Vec<DVector<f64>>,
}

/// One draw of `W_v` (present attributes x latents).
#[derive(Debug, Clone, PartialEq)]
pub struct WeightSample {
    pub w: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    LogBeta,
    LogNoise,
    PriorMean,
    PriorLogVar,
    VariationalMean,
    VariationalLogVar,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::LogBeta,
        ParamGroup::LogNoise,
        ParamGroup::PriorMean,
        ParamGroup::PriorLogVar,
        ParamGroup::VariationalMean,
        ParamGroup::VariationalLogVar,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ParamGroup::LogBeta => "log_beta",
            ParamGroup::LogNoise => "log_sigma2",
            ParamGroup::PriorMean => "prior_w_bar",
            ParamGroup::PriorLogVar => "prior_log_eta2",
            ParamGroup::VariationalMean => "q_w_bar",
            ParamGroup::VariationalLogVar => "q_log_eta2",
        }
    }
}

/// All quantities optimized by ELBO ascent.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub kernels: KernelSet,
    pub prior: WeightPrior,
    pub variational: VariationalWeights,
    pub noise: NoiseModel,
}

impl ModelState {
    /// Default starting point: zero-mean unit-variance prior, small random
    /// variational means (identical across domains for the same attribute), `eta'^2 = 0.01`, `sigma^2 = 0.1`, and kernel scales at
    /// a fifth of the largest domain side.
    pub fn init(data: &TrainingData, num_latents: usize, seed: u64) -> Result<Self> {
        if num_latents == 0 {
            return Err(Error::InvalidConfig("number of latent processes must be positive".into()));
        }
        let extent = data.max_extent();
        let kernels = KernelSet::staggered(0.2 * extent, num_latents)?;
        let s = data.num_attributes();
        let layout = data.layout();
        let mut stream = NormalStream::new(seed, Stream::Init);
        // One draw per (attribute, latent), shared by every domain observing that
        // attribute, so all domains start with the same latent orientation.
        let mut shared = DMatrix::zeros(s, num_latents);
        for r in 0..s {
            for l in 0..num_latents {
                shared[(r, l)] = 0.1 * stream.next();
            }
        }
        let w_bar = layout
            .iter()
            .map(|attrs| DMatrix::from_fn(attrs.len(), num_latents, |r, l| shared[(attrs[r], l)]))
            .collect();
        let log_eta2 = layout.iter().map(|a| DMatrix::from_element(a.len(), num_latents, 0.01f64.ln())).collect();
        let log_sigma2 = layout.iter().map(|a| DVector::from_element(a.len(), 0.1f64.ln())).collect();
        Ok(ModelState {
            kernels,
            prior: WeightPrior { w_bar: DMatrix::zeros(s, num_latents), log_eta2: DMatrix::zeros(s, num_latents) },
            variational: VariationalWeights { attributes: layout, w_bar, log_eta2 },
            noise: NoiseModel { log_sigma2 },
        })
    }

    pub fn num_latents(&self) -> usize {
        self.kernels.len()
    }

    pub fn num_domains(&self) -> usize {
        self.variational.w_bar.len()
    }

    /// Checks that shapes agree with `data`.
    pub fn check_compatible(&self, data: &TrainingData) -> Result<()> {
        let layout = data.layout();
        let l = self.num_latents();
        if self.variational.attributes != layout {
            return Err(Error::IncompatibleModel("attribute layout differs from the data".into()));
        }
        if self.prior.w_bar.shape() != (data.num_attributes(), l) || self.prior.log_eta2.shape() != (data.num_attributes(), l) {
            return Err(Error::IncompatibleModel("prior shape differs from the attribute catalogue".into()));
        }
        for (v, attrs) in layout.iter().enumerate() {
            let shape = (attrs.len(), l);
            if self.variational.w_bar[v].shape() != shape
                || self.variational.log_eta2[v].shape() != shape
                || self.noise.log_sigma2[v].len() != attrs.len()
            {
                return Err(Error::IncompatibleModel(format!("parameter shapes differ in domain {v}")));
            }
        }
        Ok(())
    }

    pub fn group_ranges(&self) -> Vec<(ParamGroup, Range<usize>)> {
        let l = self.num_latents();
        let s = self.prior.w_bar.nrows();
        let rows: usize = self.variational.attributes.iter().map(|a| a.len()).sum();
        let sizes = [
            (ParamGroup::LogBeta, l),
            (ParamGroup::LogNoise, rows),
            (ParamGroup::PriorMean, s * l),
            (ParamGroup::PriorLogVar, s * l),
            (ParamGroup::VariationalMean, rows * l),
            (ParamGroup::VariationalLogVar, rows * l),
        ];
        let mut start = 0;
        sizes
            .iter()
            .map(|&(g, n)| {
                let r = start..start + n;
                start += n;
                (g, r)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.group_ranges().last().map(|(_, r)| r.end).unwrap_or(0)
    }

    /// Flat parameter vector; matrices are laid out row by row.
    pub fn flatten(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.num_params());
        p.extend(self.kernels.kernels.iter().map(|k| k.log_beta));
        for v in &self.noise.log_sigma2 {
            p.extend(v.iter());
        }
        push_rows(&mut p, &self.prior.w_bar);
        push_rows(&mut p, &self.prior.log_eta2);
        for m in &self.variational.w_bar {
            push_rows(&mut p, m);
        }
        for m in &self.variational.log_eta2 {
            push_rows(&mut p, m);
        }
        p
    }

    /// Inverse of [`ModelState::flatten`].
    pub fn assign(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.num_params(), "parameter vector length");
        let mut it = p.iter().copied();
        for k in &mut self.kernels.kernels {
            k.log_beta = it.next().unwrap();
        }
        for v in &mut self.noise.log_sigma2 {
            v.iter_mut().for_each(|x| *x = it.next().unwrap());
        }
        read_rows(&mut it, &mut self.prior.w_bar);
        read_rows(&mut it, &mut self.prior.log_eta2);
        for m in &mut self.variational.w_bar {
            read_rows(&mut it, m);
        }
        for m in &mut self.variational.log_eta2 {
            read_rows(&mut it, m);
        }
    }
}

fn push_rows(p: &mut Vec<f64>, m: &DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            p.push(m[(r, c)]);
        }
    }
}

fn read_rows(it: &mut impl Iterator<Item = f64>, m: &mut DMatrix<f64>) {
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            m[(r, c)] = it.next().unwrap();
        }
    }
}

/// Per-latent support-to-support covariance matrices of one domain (weights not applied).
pub(crate) struct LatentCov {
    pub s: Vec<DMatrix<f64>>,
    /// Derivatives with respect to each latent's `log_beta`; empty unless requested.
    pub ds: Vec<DMatrix<f64>>,
}

pub(crate) fn latent_cov(dd: &DomainData, kernels: &KernelSet, with_grad: bool) -> LatentCov {
    let n = dd.num_obs();
    let mut s = Vec::with_capacity(kernels.len());
    let mut ds = Vec::new();
    for k in &kernels.kernels {
        let mut m = DMatrix::zeros(n, n);
        let mut g = if with_grad { DMatrix::zeros(n, n) } else { DMatrix::zeros(0, 0) };
        for i in 0..n {
            for j in i..n {
                let pc = dd.pair(i, j);
                if with_grad {
                    let (v, dv) = pc.value_dlogbeta(k);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                    g[(i, j)] = dv;
                    g[(j, i)] = dv;
                } else {
                    let v = pc.value(k);
                    m[(i, j)] = v;
                    m[(j, i)] = v;
                }
            }
        }
        s.push(m);
        if with_grad {
            ds.push(g);
        }
    }
    LatentCov { s, ds }
}

/// `C = sum_l (w_l w_l^T) o S_l + diag(sigma^2)`, filled symmetrically.
pub(crate) fn combine(dd: &DomainData, lc: &LatentCov, w: &DMatrix<f64>, log_sigma2: &DVector<f64>) -> DMatrix<f64> {
    let n = dd.num_obs();
    let mut c = DMatrix::zeros(n, n);
    for (l, s) in lc.s.iter().enumerate() {
        for j in 0..n {
            let wj = w[(dd.block_of(j), l)];
            if wj == 0.0 {
                continue;
            }
            for i in 0..=j {
                let v = w[(dd.block_of(i), l)] * wj * s[(i, j)];
                c[(i, j)] += v;
            }
        }
    }
    for j in 0..n {
        for i in 0..j {
            c[(j, i)] = c[(i, j)];
        }
        c[(j, j)] += floored(log_sigma2[dd.block_of(j)]).0;
    }
    c
}

fn check_weight_shape(dd: &DomainData, w: &DMatrix<f64>, latents: usize) -> Result<()> {
    if w.nrows() != dd.num_blocks() {
        return Err(Error::LengthMismatch { expected: dd.num_blocks(), actual: w.nrows() });
    }
    if w.ncols() != latents {
        return Err(Error::LengthMismatch { expected: latents, actual: w.ncols() });
    }
    Ok(())
}

/// Support-level covariance of one domain's observations under weights `w`.
pub fn assemble_c(dd: &DomainData, w: &WeightSample, kernels: &KernelSet, log_sigma2: &DVector<f64>) -> Result<DMatrix<f64>> {
    check_weight_shape(dd, &w.w, kernels.len())?;
    if log_sigma2.len() != dd.num_blocks() {
        return Err(Error::LengthMismatch { expected: dd.num_blocks(), actual: log_sigma2.len() });
    }
    if let Some(k) = kernels.kernels.iter().find(|k| !k.is_valid()) {
        return Err(Error::InvalidConfig(format!("kernel scale exp({}) is not a positive finite number", k.log_beta)));
    }
    Ok(combine(dd, &latent_cov(dd, kernels, false), &w.w, log_sigma2))
}

/// Cholesky factor of `C + jitter I`.
pub struct Factor {
    pub chol: Cholesky<f64, Dyn>,
    pub jitter: f64,
}

impl Factor {
    /// Jitter starts at `1e-8 * mean(diag C)` and grows tenfold up to `1e-4 * mean(diag C)`.
    pub fn new(c: &DMatrix<f64>) -> Result<Self> {
        let n = c.nrows();
        let mean_diag = if n == 0 { 1.0 } else { c.diagonal().sum() / n as f64 };
        if !(mean_diag.is_finite() && mean_diag > 0.0) || c.iter().any(|x| !x.is_finite()) {
            return Err(Error::CholeskyFailure { jitter: 0.0 });
        }
        let mut rel = JITTER_START;
        loop {
            let jitter = rel * mean_diag;
            let mut m = c.clone();
            for i in 0..n {
                m[(i, i)] += jitter;
            }
            if let Some(chol) = Cholesky::new(m) {
                return Ok(Factor { chol, jitter });
            }
            if rel >= JITTER_MAX * (1.0 - 1e-9) {
                return Err(Error::CholeskyFailure { jitter });
            }
            rel *= 10.0;
        }
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.chol.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>()
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }
}

pub(crate) fn gaussian_log_density(y: &DVector<f64>, factor: &Factor) -> (f64, DVector<f64>) {
    let alpha = factor.solve(y);
    let n = y.len() as f64;
    let ll = -0.5 * y.dot(&alpha) - 0.5 * factor.log_det() - 0.5 * n * (2.0 * PI).ln();
    (ll, alpha)
}

/// `log N(y | 0, C)` through a jittered Cholesky factorization.
pub fn log_likelihood(y: &DVector<f64>, c: &DMatrix<f64>) -> Result<f64> {
    if c.nrows() != y.len() || c.ncols() != y.len() {
        return Err(Error::LengthMismatch { expected: y.len(), actual: c.nrows() });
    }
    if y.is_empty() {
        return Ok(0.0);
    }
    let factor = Factor::new(c)?;
    Ok(gaussian_log_density(y, &factor).0)
}

/// `KL(N(mq, vq) || N(mp, vp))`.
#[inline]
pub(crate) fn kl_normal(mq: f64, vq: f64, mp: f64, vp: f64) -> f64 {
    0.5 * ((vp / vq).ln() + (vq + (mq - mp).powi(2)) / vp - 1.0)
}

/// `sum_{v,s,l} KL(q(w_vsl) || p(w_vsl))`, with each domain's rows matched to the shared prior.
pub fn kl_weights(q: &VariationalWeights, p: &WeightPrior) -> f64 {
    let mut total = 0.0;
    for (v, attrs) in q.attributes.iter().enumerate() {
        for (r, &s) in attrs.iter().enumerate() {
            for l in 0..p.w_bar.ncols() {
                total += kl_normal(
                    q.w_bar[v][(r, l)],
                    floored(q.log_eta2[v][(r, l)]).0,
                    p.w_bar[(s, l)],
                    floored(p.log_eta2[(s, l)]).0,
                );
            }
        }
    }
    total
}

/// Reparameterized draw `w = w_bar' + eps * sqrt(eta'^2)` for domain `v`.
pub fn sample_weights(q: &VariationalWeights, v: usize, eps: &DMatrix<f64>) -> Result<WeightSample> {
    let mean = &q.w_bar[v];
    if eps.shape() != mean.shape() {
        return Err(Error::LengthMismatch { expected: mean.len(), actual: eps.len() });
    }
    let w = DMatrix::from_fn(mean.nrows(), mean.ncols(), |r, l| {
        mean[(r, l)] + eps[(r, l)] * floored(q.log_eta2[v][(r, l)]).0.sqrt()
    });
    Ok(WeightSample { w })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AggregatedDataset;
    use crate::geometry::{AggregationRule, Domain, Partition, Support};
    use crate::kernels::SEKernel;

    fn point_data(points: &[f64], values: &[f64]) -> TrainingData {
        let d = Domain::with_cells("v", vec![(-5.0, 5.0)], &[100]).unwrap();
        let supports = points.iter().enumerate().map(|(i, &x)| Support::point(format!("p{i}"), "v", vec![x])).collect();
        let part = Partition { attribute_id: "a".into(), domain_id: "v".into(), supports };
        let ds = AggregatedDataset::new("a", part, AggregationRule::Average, values.to_vec());
        TrainingData::new(vec!["a".into()], vec![d], vec![ds]).unwrap()
    }

    #[test]
    fn point_supports_reduce_to_kernel_plus_noise() {
        let data = point_data(&[0.0, 1.0], &[1.0, -1.0]);
        let ks = KernelSet::new(vec![SEKernel::new(1.0)]).unwrap();
        let w = WeightSample { w: DMatrix::from_element(1, 1, 1.0) };
        let c = assemble_c(&data.domains[0], &w, &ks, &DVector::from_element(1, 0.1f64.ln())).unwrap();
        assert!((c[(0, 0)] - 1.1).abs() < 1e-12);
        assert!((c[(0, 1)] - 0.6065306597126334).abs() < 1e-12);
        assert_eq!(c[(0, 1)], c[(1, 0)]);
    }

    #[test]
    fn zero_weights_leave_noise() {
        let data = point_data(&[0.0, 0.3, 2.0], &[1.0, 2.0, 0.5]);
        let ks = KernelSet::new(vec![SEKernel::new(1.0), SEKernel::new(0.5)]).unwrap();
        let w = WeightSample { w: DMatrix::zeros(1, 2) };
        let c = assemble_c(&data.domains[0], &w, &ks, &DVector::from_element(1, 0.25f64.ln())).unwrap();
        assert_eq!(c, DMatrix::from_diagonal_element(3, 3, 0.25));
        let bad = WeightSample { w: DMatrix::zeros(2, 2) };
        assert!(assemble_c(&data.domains[0], &bad, &ks, &DVector::zeros(1)).is_err());
    }

    #[test]
    fn log_likelihood_closed_forms() {
        let one = DMatrix::from_element(1, 1, 1.0);
        let ll = log_likelihood(&DVector::from_vec(vec![0.0]), &one).unwrap();
        assert!((ll - -0.9189385332046727).abs() < 1e-7);
        let ll = log_likelihood(&DVector::from_vec(vec![1.0]), &one).unwrap();
        assert!((ll - -1.4189385332046727).abs() < 1e-7);
        let ll = log_likelihood(&DVector::zeros(2), &DMatrix::identity(2, 2)).unwrap();
        assert!((ll - -1.8378770664093453).abs() < 1e-7);
    }

    #[test]
    fn jitter_escalates_then_fails() {
        // Rank one: needs jitter beyond the first level only for rounding, succeeds.
        let c = DMatrix::from_element(3, 3, 1.0);
        assert!(Factor::new(&c).is_ok());
        let indefinite = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 2.0, 1.0]);
        assert!(matches!(Factor::new(&indefinite), Err(Error::CholeskyFailure { .. })));
    }

    fn one_term(mq: f64, vq: f64, mp: f64, vp: f64) -> (VariationalWeights, WeightPrior) {
        (
            VariationalWeights {
                attributes: vec![vec![0]],
                w_bar: vec![DMatrix::from_element(1, 1, mq)],
                log_eta2: vec![DMatrix::from_element(1, 1, vq.ln())],
            },
            WeightPrior { w_bar: DMatrix::from_element(1, 1, mp), log_eta2: DMatrix::from_element(1, 1, vp.ln()) },
        )
    }

    #[test]
    fn kl_closed_forms() {
        let (q, p) = one_term(0.3, 0.7, 0.3, 0.7);
        assert!(kl_weights(&q, &p).abs() < 1e-15);
        let (q, p) = one_term(1.0, 1.0, 0.0, 1.0);
        assert!((kl_weights(&q, &p) - 0.5).abs() < 1e-12);
        let (q, p) = one_term(0.0, 2.0, 0.0, 1.0);
        assert!((kl_weights(&q, &p) - 0.1534264097200273).abs() < 1e-12);
    }

    #[test]
    fn reparameterized_samples() {
        let (q, _) = one_term(0.5, 0.04, 0.0, 1.0);
        let w = sample_weights(&q, 0, &DMatrix::from_element(1, 1, 1.0)).unwrap();
        assert!((w.w[(0, 0)] - 0.7).abs() < 1e-12);
        let w = sample_weights(&q, 0, &DMatrix::zeros(1, 1)).unwrap();
        assert_eq!(w.w[(0, 0)], 0.5);
        let (q, _) = one_term(0.5, 1e-300, 0.0, 1.0);
        let w = sample_weights(&q, 0, &DMatrix::from_element(1, 1, 3.0)).unwrap();
        assert!((w.w[(0, 0)] - (0.5 + 3e-6)).abs() < 1e-15);
        assert!(sample_weights(&q, 0, &DMatrix::zeros(2, 1)).is_err());
    }

    #[test]
    fn flatten_assign_round_trip() {
        let data = point_data(&[0.0, 1.0, 2.0], &[1.0, 2.0, 4.0]);
        let state = ModelState::init(&data, 2, 11).unwrap();
        let p = state.flatten();
        assert_eq!(p.len(), state.num_params());
        let mut other = state.clone();
        let shifted: Vec<f64> = p.iter().map(|x| x + 1.0).collect();
        other.assign(&shifted);
        assert_eq!(other.flatten(), shifted);
        other.assign(&p);
        assert_eq!(other, state);
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative(mq in -3.0f64..3.0, lvq in -10.0f64..3.0, mp in -3.0f64..3.0, lvp in -10.0f64..3.0) {
            let (q, p) = one_term(mq, lvq.exp(), mp, lvp.exp());
            proptest::prop_assert!(kl_weights(&q, &p) >= -1e-12);
        }

        #[test]
        fn log_likelihood_permutation_invariant(seed in 0u64..1000) {
            let mut s = NormalStream::new(seed, Stream::Synth);
            let n = 5;
            let a = DMatrix::from_fn(n, n, |_, _| s.next());
            let c = &a * a.transpose() + DMatrix::identity(n, n);
            let y = DVector::from_fn(n, |_, _| s.next());
            let perm = [3usize, 0, 4, 1, 2];
            let cp = DMatrix::from_fn(n, n, |i, j| c[(perm[i], perm[j])]);
            let yp = DVector::from_fn(n, |i, _| y[perm[i]]);
            let a = log_likelihood(&y, &c).unwrap();
            let b = log_likelihood(&yp, &cp).unwrap();
            proptest::prop_assert!((a - b).abs() < 1e-10 * a.abs().max(1.0));
        }
    }
}
