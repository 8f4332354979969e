//! Posterior of the attribute fields given a weight draw, the Monte-Carlo
//! mixture over `q(W)`, and predictions for points or whole supports.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::data::{DomainData, TrainingData};
use crate::error::{Error, Result};
use crate::geometry::{AggregationRule, Partition};
use crate::kernels::{KernelSet, PairCov, ResolvedSupport};
use crate::model::{combine, latent_cov, sample_weights, Factor, LatentCov, ModelState, WeightSample};
use crate::rng::{NormalStream, Stream};

/// Gaussian over a set of probes (points or supports, each tied to one attribute).
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalPosterior {
    pub mean: DVector<f64>,
    /// Marginal variances.
    pub var: DVector<f64>,
    /// Full covariance, when requested.
    pub cov: Option<DMatrix<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveMixture {
    /// Equally weighted components, one per weight draw.
    pub components: Vec<ConditionalPosterior>,
    pub pooled: ConditionalPosterior,
    /// Pooled variances that came out negative and were set to zero.
    pub clamped: usize,
}

/// Things to predict: each probe is a resolved support paired with a block (attribute) index.
#[derive(Debug, Clone)]
pub struct Probes {
    pub supports: Vec<ResolvedSupport>,
    pub blocks: Vec<usize>,
}

impl Probes {
    /// Every point for every listed block, block-major: index `r * points.len() + k`.
    pub fn points(dd: &DomainData, points: &[Vec<f64>], blocks: &[usize]) -> Result<Self> {
        for x in points {
            if x.len() != dd.domain.dimension() {
                return Err(Error::DimensionMismatch { expected: dd.domain.dimension(), actual: x.len() });
            }
            if !dd.domain.contains(x) {
                return Err(Error::OutOfBounds { what: format!("query point {x:?} outside domain {}", dd.domain.id) });
            }
        }
        check_blocks(dd, blocks)?;
        let mut supports = Vec::with_capacity(points.len() * blocks.len());
        let mut out_blocks = Vec::with_capacity(points.len() * blocks.len());
        for &b in blocks {
            for x in points {
                supports.push(ResolvedSupport::point(x.clone()));
                out_blocks.push(b);
            }
        }
        Ok(Probes { supports, blocks: out_blocks })
    }

    /// The supports of `partition`, aggregated with `rule`, for block `block`.
    pub fn partition(dd: &DomainData, partition: &Partition, rule: &AggregationRule, block: usize) -> Result<Self> {
        if partition.domain_id != dd.domain.id {
            return Err(Error::InvalidGeometry(format!(
                "partition lives in domain {}, not {}",
                partition.domain_id, dd.domain.id
            )));
        }
        crate::geometry::validate(&dd.domain, std::slice::from_ref(partition))?;
        check_blocks(dd, &[block])?;
        let supports = partition
            .supports
            .iter()
            .map(|s| ResolvedSupport::resolve(s, &dd.domain, rule))
            .collect::<Result<Vec<_>>>()?;
        let blocks = vec![block; supports.len()];
        Ok(Probes { supports, blocks })
    }

    pub fn len(&self) -> usize {
        self.supports.len()
    }

    pub fn is_empty(&self) -> bool {
        self.supports.is_empty()
    }
}

fn check_blocks(dd: &DomainData, blocks: &[usize]) -> Result<()> {
    if let Some(&b) = blocks.iter().find(|&&b| b >= dd.num_blocks()) {
        return Err(Error::OutOfBounds { what: format!("attribute block {b} in domain {}", dd.domain.id) });
    }
    Ok(())
}

/// Per-latent covariances involving the probes; independent of the weights.
struct ProbeGeometry {
    latent: LatentCov,
    /// `N x P` training-to-probe covariances.
    cross: Vec<DMatrix<f64>>,
    /// `P x P` probe covariances, when the full covariance is wanted.
    full: Option<Vec<DMatrix<f64>>>,
    diag: Vec<DVector<f64>>,
}

fn probe_geometry(dd: &DomainData, probes: &Probes, kernels: &KernelSet, full: bool) -> Result<ProbeGeometry> {
    let n = dd.num_obs();
    let p = probes.len();
    let h = &dd.domain.grid.cell_size;
    let mut cross = vec![DMatrix::zeros(n, p); kernels.len()];
    for (j, probe) in probes.supports.iter().enumerate() {
        for (i, sup) in dd.supports().iter().enumerate() {
            let pc = PairCov::between(sup, probe, h)?;
            for (l, k) in kernels.kernels.iter().enumerate() {
                cross[l][(i, j)] = pc.value(k);
            }
        }
    }
    let mut diag = vec![DVector::zeros(p); kernels.len()];
    let mut full_m = full.then(|| vec![DMatrix::zeros(p, p); kernels.len()]);
    for j in 0..p {
        let range = if full { j..p } else { j..j + 1 };
        for jj in range {
            let pc = PairCov::between(&probes.supports[j], &probes.supports[jj], h)?;
            for (l, k) in kernels.kernels.iter().enumerate() {
                let v = pc.value(k);
                if jj == j {
                    diag[l][j] = v;
                }
                if let Some(m) = full_m.as_mut() {
                    m[l][(j, jj)] = v;
                    m[l][(jj, j)] = v;
                }
            }
        }
    }
    Ok(ProbeGeometry { latent: latent_cov(dd, kernels, false), cross, full: full_m, diag })
}

/// Unclamped posterior for one weight draw.
fn condition(dd: &DomainData, geo: &ProbeGeometry, probes: &Probes, w: &DMatrix<f64>, log_sigma2: &DVector<f64>) -> Result<ConditionalPosterior> {
    let n = dd.num_obs();
    let p = probes.len();
    let mut hmat = DMatrix::zeros(n, p);
    let mut var = DVector::zeros(p);
    let mut cov = geo.full.as_ref().map(|_| DMatrix::zeros(p, p));
    for l in 0..geo.cross.len() {
        let wp = DVector::from_fn(p, |j, _| w[(probes.blocks[j], l)]);
        for j in 0..p {
            if wp[j] == 0.0 {
                continue;
            }
            for i in 0..n {
                hmat[(i, j)] += w[(dd.block_of(i), l)] * wp[j] * geo.cross[l][(i, j)];
            }
            var[j] += wp[j] * wp[j] * geo.diag[l][j];
        }
        if let (Some(c), Some(k)) = (cov.as_mut(), geo.full.as_ref()) {
            *c += k[l].component_mul(&(&wp * wp.transpose()));
        }
    }
    if n == 0 {
        return Ok(ConditionalPosterior { mean: DVector::zeros(p), var, cov });
    }
    let c = combine(dd, &geo.latent, w, log_sigma2);
    let factor = Factor::new(&c)?;
    let alpha = factor.solve(&dd.y);
    let mean = hmat.tr_mul(&alpha);
    let v = factor.chol.l_dirty().solve_lower_triangular(&hmat).ok_or(Error::CholeskyFailure { jitter: factor.jitter })?;
    for j in 0..p {
        var[j] -= v.column(j).norm_squared();
    }
    if let Some(c) = cov.as_mut() {
        *c -= v.tr_mul(&v);
        for j in 0..p {
            c[(j, j)] = var[j];
        }
    }
    Ok(ConditionalPosterior { mean, var, cov })
}

fn clamp(post: &mut ConditionalPosterior) -> usize {
    let mut count = 0;
    for j in 0..post.var.len() {
        if post.var[j] < 0.0 {
            post.var[j] = 0.0;
            count += 1;
            if let Some(c) = post.cov.as_mut() {
                c[(j, j)] = 0.0;
            }
        }
    }
    count
}

/// Point-to-support covariances `H_v`: rows are observations, columns are
/// `(attribute block r, point k)` at index `r * points.len() + k`.
pub fn cross_cov_h(points: &[Vec<f64>], dd: &DomainData, w: &WeightSample, kernels: &KernelSet) -> Result<DMatrix<f64>> {
    let blocks: Vec<usize> = (0..dd.num_blocks()).collect();
    let probes = Probes::points(dd, points, &blocks)?;
    check_weights(dd, w, kernels.len())?;
    let n = dd.num_obs();
    let mut out = DMatrix::zeros(n, probes.len());
    let h = &dd.domain.grid.cell_size;
    for (j, probe) in probes.supports.iter().enumerate() {
        for (i, sup) in dd.supports().iter().enumerate() {
            let pc = PairCov::between(sup, probe, h)?;
            out[(i, j)] = kernels
                .kernels
                .iter()
                .enumerate()
                .map(|(l, k)| w.w[(dd.block_of(i), l)] * w.w[(probes.blocks[j], l)] * pc.value(k))
                .sum();
        }
    }
    Ok(out)
}

fn check_weights(dd: &DomainData, w: &WeightSample, latents: usize) -> Result<()> {
    if w.w.shape() != (dd.num_blocks(), latents) {
        return Err(Error::LengthMismatch { expected: dd.num_blocks() * latents, actual: w.w.len() });
    }
    Ok(())
}

/// Posterior over `probes` in domain `v` given the weight draw `w`; variances clamped at zero.
pub fn conditional_posterior_probes(
    data: &TrainingData,
    state: &ModelState,
    v: usize,
    probes: &Probes,
    w: &WeightSample,
    full: bool,
) -> Result<ConditionalPosterior> {
    state.check_compatible(data)?;
    let dd = &data.domains[v];
    check_weights(dd, w, state.num_latents())?;
    let geo = probe_geometry(dd, probes, &state.kernels, full)?;
    let mut post = condition(dd, &geo, probes, &w.w, &state.noise.log_sigma2[v])?;
    clamp(&mut post);
    Ok(post)
}

/// Full posterior at `points` for every attribute present in domain `v`, block-major.
pub fn conditional_posterior(
    points: &[Vec<f64>],
    w: &WeightSample,
    state: &ModelState,
    data: &TrainingData,
    v: usize,
) -> Result<ConditionalPosterior> {
    let dd = &data.domains[v];
    let blocks: Vec<usize> = (0..dd.num_blocks()).collect();
    let probes = Probes::points(dd, points, &blocks)?;
    conditional_posterior_probes(data, state, v, &probes, w, true)
}

/// Mixture over `t_p` draws of `W_v ~ q`, pooled by moment matching.
pub fn predictive_mixture_probes(
    data: &TrainingData,
    state: &ModelState,
    v: usize,
    probes: &Probes,
    t_p: usize,
    seed: u64,
    full: bool,
) -> Result<PredictiveMixture> {
    if t_p == 0 {
        return Err(Error::InvalidConfig("T_p must be at least 1".into()));
    }
    state.check_compatible(data)?;
    let dd = &data.domains[v];
    let geo = probe_geometry(dd, probes, &state.kernels, full)?;
    let shape = state.variational.w_bar[v].shape();
    let eps = NormalStream::new(seed, Stream::Predict).matrices(&[shape], t_p).pop().unwrap();
    let mut components = eps
        .par_iter()
        .map(|e| {
            let w = sample_weights(&state.variational, v, e)?;
            condition(dd, &geo, probes, &w.w, &state.noise.log_sigma2[v])
        })
        .collect::<Result<Vec<_>>>()?;

    let p = probes.len();
    let t = t_p as f64;
    let mut mean = DVector::zeros(p);
    for c in &components {
        mean += &c.mean;
    }
    mean /= t;
    let mut var = DVector::zeros(p);
    let mut cov = full.then(|| DMatrix::zeros(p, p));
    for c in &components {
        let d = &c.mean - &mean;
        var += &c.var + d.component_mul(&d);
        if let (Some(acc), Some(k)) = (cov.as_mut(), c.cov.as_ref()) {
            *acc += k + &d * d.transpose();
        }
    }
    var /= t;
    if let Some(acc) = cov.as_mut() {
        *acc /= t;
        for j in 0..p {
            acc[(j, j)] = var[j];
        }
    }
    let mut pooled = ConditionalPosterior { mean, var, cov };
    let clamped = clamp(&mut pooled);
    if clamped > 0 {
        log::warn!("{clamped} pooled variances were negative and set to zero");
    }
    for c in &mut components {
        clamp(c);
    }
    Ok(PredictiveMixture { components, pooled, clamped })
}

/// Pooled predictive moments at `points`, for every attribute of domain `v`.
pub fn predictive_mixture(
    points: &[Vec<f64>],
    state: &ModelState,
    data: &TrainingData,
    v: usize,
    t_p: usize,
    seed: u64,
) -> Result<PredictiveMixture> {
    let dd = &data.domains[v];
    let blocks: Vec<usize> = (0..dd.num_blocks()).collect();
    let probes = Probes::points(dd, points, &blocks)?;
    predictive_mixture_probes(data, state, v, &probes, t_p, seed, true)
}

/// Support-level predictions in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct SupportPrediction {
    pub support_ids: Vec<String>,
    pub values: Vec<f64>,
    pub variances: Vec<f64>,
    pub clamped: usize,
}

fn locate(data: &TrainingData, domain_id: &str, attribute_id: &str) -> Result<(usize, usize)> {
    let v = data
        .domain_index(domain_id)
        .ok_or_else(|| Error::Precondition(format!("domain {domain_id} has no training data")))?;
    let s = data
        .attribute_index(attribute_id)
        .ok_or_else(|| Error::Precondition(format!("attribute {attribute_id} is not in the catalogue")))?;
    let b = data.domains[v]
        .block_for(s)
        .ok_or_else(|| Error::Precondition(format!("attribute {attribute_id} has no data in domain {domain_id}")))?;
    Ok((v, b))
}

/// Aggregated posterior over each support of `target` (mean and variance of the
/// support value under the pooled mixture), denormalized.
pub fn predict_supports(
    target: &Partition,
    rule: &AggregationRule,
    state: &ModelState,
    data: &TrainingData,
    t_p: usize,
    seed: u64,
) -> Result<SupportPrediction> {
    if target.supports.is_empty() {
        return Err(Error::EmptyPartition { partition: format!("{}/{}", target.domain_id, target.attribute_id) });
    }
    let (v, b) = locate(data, &target.domain_id, &target.attribute_id)?;
    let dd = &data.domains[v];
    let probes = Probes::partition(dd, target, rule, b)?;
    let mix = predictive_mixture_probes(data, state, v, &probes, t_p, seed, false)?;
    let norm = dd.blocks[b].norm;
    Ok(SupportPrediction {
        support_ids: target.supports.iter().map(|s| s.id.clone()).collect(),
        values: mix.pooled.mean.iter().map(|&m| norm.denormalize(m)).collect(),
        variances: mix.pooled.var.iter().map(|&x| norm.denormalize_variance(x)).collect(),
        clamped: mix.clamped,
    })
}

/// Pointwise predictions over the whole grid of a domain, in original units.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPrediction {
    pub points: Vec<Vec<f64>>,
    pub mean: Vec<f64>,
    pub variance: Vec<f64>,
    pub clamped: usize,
}

pub fn predict_grid(
    domain_id: &str,
    attribute_id: &str,
    state: &ModelState,
    data: &TrainingData,
    t_p: usize,
    seed: u64,
) -> Result<GridPrediction> {
    let (v, b) = locate(data, domain_id, attribute_id)?;
    let dd = &data.domains[v];
    let grid = &dd.domain.grid;
    let points: Vec<Vec<f64>> = (0..grid.len()).map(|c| grid.point(c)).collect();
    let probes = Probes::points(dd, &points, &[b])?;
    let mix = predictive_mixture_probes(data, state, v, &probes, t_p, seed, false)?;
    let norm = dd.blocks[b].norm;
    Ok(GridPrediction {
        points,
        mean: mix.pooled.mean.iter().map(|&m| norm.denormalize(m)).collect(),
        variance: mix.pooled.var.iter().map(|&x| norm.denormalize_variance(x)).collect(),
        clamped: mix.clamped,
    })
}
