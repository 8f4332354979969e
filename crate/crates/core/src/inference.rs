//! Monte-Carlo ELBO, its exact reparameterized gradient, and Adam ascent.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DomainData, TrainingData};
use crate::error::{Error, Result};
use crate::model::{combine, floored, gaussian_log_density, kl_normal, latent_cov, sample_weights, Factor, ModelState, ParamGroup};
use crate::rng::{NormalStream, Stream};

/// Standard normal draws indexed `[domain][sample]`, each of shape `|S_v| x L`.
pub type EpsDraws = Vec<Vec<DMatrix<f64>>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_iters: usize,
    /// Monte-Carlo samples per iteration.
    pub t_e: usize,
    pub seed: u64,
    /// Relative change between consecutive window averages that counts as converged.
    pub convergence_tol: f64,
    pub window: usize,
    /// Draw one set of samples and reuse it every iteration.
    pub fixed_eps: bool,
    /// Samples used to compare the initial and returned states; 0 skips the comparison.
    pub margin_draws: usize,
    pub max_backoffs: usize,
    /// Parameter groups held at their initial values.
    pub frozen: Vec<ParamGroup>,
    /// Record the flat parameter vector every this many iterations; 0 disables.
    pub snapshot_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            max_iters: 5000,
            t_e: 1,
            seed: 0,
            convergence_tol: 1e-6,
            window: 50,
            fixed_eps: false,
            margin_draws: 256,
            max_backoffs: 5,
            frozen: Vec::new(),
            snapshot_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        if self.t_e == 0 {
            return Err(Error::InvalidConfig("t_e must be at least 1".into()));
        }
        if self.window == 0 {
            return Err(Error::InvalidConfig("window must be at least 1".into()));
        }
        if !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidConfig("convergence_tol must be non-negative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub iteration: usize,
    pub elbo: f64,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub entries: Vec<TraceEntry>,
    /// Iterations at which the learning rate was halved.
    pub backoffs: Vec<usize>,
    /// Iteration whose parameters were returned.
    pub best_iteration: Option<usize>,
    pub converged: bool,
    /// ELBO of the initial and returned states under the same `margin_draws` samples.
    pub init_elbo: Option<f64>,
    pub final_elbo: Option<f64>,
    pub snapshots: Vec<(usize, Vec<f64>)>,
    #[serde(skip)]
    pub elapsed_secs: f64,
}

impl TrainTrace {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn margin(&self) -> Option<f64> {
        Some(self.final_elbo? - self.init_elbo?)
    }
}

pub fn eps_shapes(state: &ModelState) -> Vec<(usize, usize)> {
    state.variational.w_bar.iter().map(|m| m.shape()).collect()
}

pub fn draw_eps(stream: &mut NormalStream, state: &ModelState, samples: usize) -> EpsDraws {
    stream.matrices(&eps_shapes(state), samples)
}

fn check_eps(state: &ModelState, eps: &EpsDraws) -> Result<usize> {
    if eps.len() != state.num_domains() {
        return Err(Error::LengthMismatch { expected: state.num_domains(), actual: eps.len() });
    }
    let t = eps.first().map(|e| e.len()).unwrap_or(1);
    if t == 0 || eps.iter().any(|e| e.len() != t) {
        return Err(Error::Precondition("every domain needs the same positive number of samples".into()));
    }
    Ok(t)
}

/// Gradient of the ELBO laid out like [`ModelState::flatten`].
pub(crate) struct Layout {
    log_beta: usize,
    noise: Vec<usize>,
    prior_mean: usize,
    prior_logvar: usize,
    q_mean: Vec<usize>,
    q_logvar: Vec<usize>,
    latents: usize,
}

impl Layout {
    pub(crate) fn of(state: &ModelState) -> Self {
        let ranges = state.group_ranges();
        let start = |g: ParamGroup| ranges.iter().find(|(h, _)| *h == g).unwrap().1.start;
        let l = state.num_latents();
        let rows: Vec<usize> = state.variational.attributes.iter().map(|a| a.len()).collect();
        let cum = |base: usize, per: usize| {
            let mut acc = base;
            rows.iter()
                .map(|r| {
                    let s = acc;
                    acc += r * per;
                    s
                })
                .collect::<Vec<_>>()
        };
        Layout {
            log_beta: start(ParamGroup::LogBeta),
            noise: cum(start(ParamGroup::LogNoise), 1),
            prior_mean: start(ParamGroup::PriorMean),
            prior_logvar: start(ParamGroup::PriorLogVar),
            q_mean: cum(start(ParamGroup::VariationalMean), l),
            q_logvar: cum(start(ParamGroup::VariationalLogVar), l),
            latents: l,
        }
    }
}

struct DomainTerm {
    ll: f64,
    log_beta: Vec<f64>,
    log_sigma2: Vec<f64>,
    mean: DMatrix<f64>,
    logvar: DMatrix<f64>,
}

fn domain_term(dd: &DomainData, state: &ModelState, v: usize, eps: &[DMatrix<f64>], with_grad: bool) -> Result<DomainTerm> {
    let l_count = state.num_latents();
    let rows = dd.num_blocks();
    let mut term = DomainTerm {
        ll: 0.0,
        log_beta: vec![0.0; l_count],
        log_sigma2: vec![0.0; rows],
        mean: DMatrix::zeros(rows, l_count),
        logvar: DMatrix::zeros(rows, l_count),
    };
    let n = dd.num_obs();
    if n == 0 {
        return Ok(term);
    }
    let lc = latent_cov(dd, &state.kernels, with_grad);
    let scale = 1.0 / eps.len() as f64;
    let log_sigma2 = &state.noise.log_sigma2[v];
    for e in eps {
        let w = sample_weights(&state.variational, v, e)?.w;
        let c = combine(dd, &lc, &w, log_sigma2);
        let factor = Factor::new(&c)?;
        let (ll, alpha) = gaussian_log_density(&dd.y, &factor);
        term.ll += scale * ll;
        if !with_grad {
            continue;
        }
        // dlogN/dC = Q / 2 with Q = alpha alpha^T - C^-1.
        let mut q = factor.chol.inverse();
        q.ger(1.0, &alpha, &alpha, -1.0);
        let mut gw = DMatrix::<f64>::zeros(rows, l_count);
        for l in 0..l_count {
            let wcol = DVector::from_fn(n, |i, _| w[(dd.block_of(i), l)]);
            let u = q.component_mul(&lc.s[l]) * &wcol;
            for i in 0..n {
                gw[(dd.block_of(i), l)] += u[i];
            }
            let ud = q.component_mul(&lc.ds[l]) * &wcol;
            term.log_beta[l] += scale * 0.5 * wcol.dot(&ud);
        }
        for i in 0..n {
            let b = dd.block_of(i);
            let (s2, active) = floored(log_sigma2[b]);
            if active {
                term.log_sigma2[b] += scale * 0.5 * q[(i, i)] * s2;
            }
        }
        let log_eta2 = &state.variational.log_eta2[v];
        for r in 0..rows {
            for l in 0..l_count {
                term.mean[(r, l)] += scale * gw[(r, l)];
                let (eta2, active) = floored(log_eta2[(r, l)]);
                if active {
                    term.logvar[(r, l)] += scale * gw[(r, l)] * e[(r, l)] * 0.5 * eta2.sqrt();
                }
            }
        }
    }
    Ok(term)
}

fn domain_terms(data: &TrainingData, state: &ModelState, eps: &EpsDraws, with_grad: bool) -> Result<Vec<DomainTerm>> {
    data.domains
        .par_iter()
        .enumerate()
        .map(|(v, dd)| domain_term(dd, state, v, &eps[v], with_grad))
        .collect()
}

/// `sum_v mean_t log N(y_v | 0, C_v(W_v^(t))) - KL(q || p)`.
pub fn estimate_elbo(data: &TrainingData, state: &ModelState, eps: &EpsDraws) -> Result<f64> {
    state.check_compatible(data)?;
    check_eps(state, eps)?;
    let terms = domain_terms(data, state, eps, false)?;
    let ll: f64 = terms.iter().map(|t| t.ll).sum();
    Ok(ll - crate::model::kl_weights(&state.variational, &state.prior))
}

/// ELBO estimate and its exact gradient at fixed `eps`, aligned with [`ModelState::flatten`].
pub fn elbo_and_grad(data: &TrainingData, state: &ModelState, eps: &EpsDraws) -> Result<(f64, Vec<f64>)> {
    state.check_compatible(data)?;
    check_eps(state, eps)?;
    let terms = domain_terms(data, state, eps, true)?;
    let lay = Layout::of(state);
    let l_count = lay.latents;
    let mut g = vec![0.0; state.num_params()];
    let mut elbo = 0.0;
    for (v, t) in terms.iter().enumerate() {
        elbo += t.ll;
        for l in 0..l_count {
            g[lay.log_beta + l] += t.log_beta[l];
        }
        for (r, x) in t.log_sigma2.iter().enumerate() {
            g[lay.noise[v] + r] += x;
        }
        for r in 0..t.mean.nrows() {
            for l in 0..l_count {
                g[lay.q_mean[v] + r * l_count + l] += t.mean[(r, l)];
                g[lay.q_logvar[v] + r * l_count + l] += t.logvar[(r, l)];
            }
        }
    }
    let q = &state.variational;
    let p = &state.prior;
    for (v, attrs) in q.attributes.iter().enumerate() {
        for (r, &s) in attrs.iter().enumerate() {
            for l in 0..l_count {
                let mq = q.w_bar[v][(r, l)];
                let (vq, q_active) = floored(q.log_eta2[v][(r, l)]);
                let mp = p.w_bar[(s, l)];
                let (vp, p_active) = floored(p.log_eta2[(s, l)]);
                elbo -= kl_normal(mq, vq, mp, vp);
                let d = mq - mp;
                g[lay.q_mean[v] + r * l_count + l] -= d / vp;
                g[lay.prior_mean + s * l_count + l] += d / vp;
                if q_active {
                    g[lay.q_logvar[v] + r * l_count + l] -= 0.5 * (vq / vp - 1.0);
                }
                if p_active {
                    g[lay.prior_logvar + s * l_count + l] -= 0.5 * (1.0 - (vq + d * d) / vp);
                }
            }
        }
    }
    Ok((elbo, g))
}

pub fn grad_elbo(data: &TrainingData, state: &ModelState, eps: &EpsDraws) -> Result<Vec<f64>> {
    Ok(elbo_and_grad(data, state, eps)?.1)
}

fn frozen_mask(state: &ModelState, frozen: &[ParamGroup]) -> Vec<bool> {
    let mut mask = vec![false; state.num_params()];
    for (g, r) in state.group_ranges() {
        if frozen.contains(&g) {
            mask[r].iter_mut().for_each(|m| *m = true);
        }
    }
    mask
}

#[derive(Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Adam { m: vec![0.0; n], v: vec![0.0; n], t: 0 }
    }

    /// One ascent step on `params` along `grad`.
    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64, frozen: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - Self::BETA1.powi(self.t);
        let c2 = 1.0 - Self::BETA2.powi(self.t);
        for i in 0..params.len() {
            if frozen[i] {
                continue;
            }
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] += lr * mh / (vh.sqrt() + Self::EPS);
        }
    }
}

fn window_mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Adam ascent on the ELBO with fresh samples every iteration.
///
/// Returns the parameters at the end of the best trailing window of ELBO estimates.
pub fn fit(data: &TrainingData, config: &TrainConfig, init: &ModelState) -> Result<(ModelState, TrainTrace)> {
    config.validate()?;
    init.check_compatible(data)?;
    let started = Instant::now();
    let mut trace = TrainTrace::default();
    if config.max_iters == 0 {
        return Ok((init.clone(), trace));
    }

    let mut stream = NormalStream::new(config.seed, Stream::Train);
    let fixed = config.fixed_eps.then(|| draw_eps(&mut stream, init, config.t_e));
    let frozen = frozen_mask(init, &config.frozen);
    let mut state = init.clone();
    let mut params = init.flatten();
    let mut adam = Adam::new(params.len());
    let mut lr = config.learning_rate;
    let mut previous: Option<(Vec<f64>, Adam)> = None;
    let mut best: Option<(f64, usize, Vec<f64>)> = None;
    let mut elbos: Vec<f64> = Vec::new();

    let mut it = 0;
    while it < config.max_iters {
        let drawn;
        let eps = match &fixed {
            Some(e) => e,
            None => {
                drawn = draw_eps(&mut stream, &state, config.t_e);
                &drawn
            }
        };
        let evaluated = match elbo_and_grad(data, &state, eps) {
            Ok((elbo, g)) if elbo.is_finite() && g.iter().all(|x| x.is_finite()) => Ok((elbo, g)),
            Ok(_) => Err(Error::NonFiniteElbo { iteration: it }),
            Err(e @ Error::CholeskyFailure { .. }) => Err(e),
            Err(e) => return Err(e),
        };
        let (elbo, grad) = match evaluated {
            Ok(x) => x,
            Err(err) => {
                if trace.backoffs.len() >= config.max_backoffs {
                    return Err(err);
                }
                lr *= 0.5;
                trace.backoffs.push(it);
                log::warn!("iteration {it}: {err}; learning rate halved to {lr:e}");
                if let Some((p, a)) = previous.take() {
                    params = p;
                    adam = a;
                    state.assign(&params);
                    elbos.pop();
                    trace.entries.pop();
                    it -= 1;
                }
                continue;
            }
        };

        trace.entries.push(TraceEntry { iteration: it, elbo, learning_rate: lr });
        elbos.push(elbo);
        if config.snapshot_every > 0 && it % config.snapshot_every == 0 {
            trace.snapshots.push((it, params.clone()));
        }
        let w = config.window.min(config.max_iters);
        if elbos.len() >= w {
            let avg = window_mean(&elbos[elbos.len() - w..]);
            if best.as_ref().is_none_or(|(b, _, _)| avg > *b) {
                best = Some((avg, it, params.clone()));
            }
        }
        if it % 100 == 0 {
            log::debug!("iteration {it}: elbo {elbo:.6} lr {lr:e}");
        }
        let n = elbos.len();
        if n >= 2 * config.window && n.is_multiple_of(config.window) {
            let cur = window_mean(&elbos[n - config.window..]);
            let prev = window_mean(&elbos[n - 2 * config.window..n - config.window]);
            if ((cur - prev) / prev.abs().max(f64::MIN_POSITIVE)).abs() < config.convergence_tol {
                trace.converged = true;
                break;
            }
        }

        previous = Some((params.clone(), adam.clone()));
        adam.step(&mut params, &grad, lr, &frozen);
        state.assign(&params);
        it += 1;
    }

    let (best_iter, best_params) = match best {
        Some((_, i, p)) => (i, p),
        None => (0, init.flatten()),
    };
    let mut out = init.clone();
    out.assign(&best_params);
    trace.best_iteration = Some(best_iter);

    if config.margin_draws > 0 {
        let mut margin_stream = NormalStream::new(config.seed, Stream::Margin);
        let eps = draw_eps(&mut margin_stream, init, config.margin_draws);
        trace.init_elbo = estimate_elbo(data, init, &eps).ok();
        trace.final_elbo = estimate_elbo(data, &out, &eps).ok();
    }
    trace.elapsed_secs = started.elapsed().as_secs_f64();
    Ok((out, trace))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::AggregatedDataset;
    use crate::geometry::{AggregationRule, Domain, Partition, Support};

    pub(crate) fn tiny_data() -> TrainingData {
        let d = Domain::with_cells("v", vec![(0.0, 1.0)], &[20]).unwrap();
        let p1 = Partition {
            attribute_id: "a".into(),
            domain_id: "v".into(),
            supports: vec![
                Support::interval("a0", "v", 0.0, 0.3),
                Support::interval("a1", "v", 0.3, 0.6),
                Support::interval("a2", "v", 0.6, 1.0),
            ],
        };
        let p2 = Partition {
            attribute_id: "b".into(),
            domain_id: "v".into(),
            supports: vec![Support::cells("b0", "v", (0..10).collect()), Support::cells("b1", "v", (10..20).collect())],
        };
        let d2 = Domain::with_cells("u", vec![(0.0, 1.0)], &[10]).unwrap();
        let p3 = Partition {
            attribute_id: "a".into(),
            domain_id: "u".into(),
            supports: vec![Support::interval("c0", "u", 0.0, 0.5), Support::interval("c1", "u", 0.5, 1.0)],
        };
        TrainingData::new(
            vec!["a".into(), "b".into()],
            vec![d, d2],
            vec![
                AggregatedDataset::new("a", p1, AggregationRule::Average, vec![1.0, 2.5, 2.0]),
                AggregatedDataset::new("b", p2, AggregationRule::Average, vec![0.5, -0.25]),
                AggregatedDataset::new("c", p3, AggregationRule::Average, vec![3.0, 1.0]),
            ],
        )
        .unwrap()
    }

    #[test]
    fn duplicate_samples_average_to_one() {
        let data = tiny_data();
        let state = ModelState::init(&data, 2, 3).unwrap();
        let mut s = NormalStream::new(1, Stream::Train);
        let one = draw_eps(&mut s, &state, 1);
        let two: EpsDraws = one.iter().map(|e| vec![e[0].clone(), e[0].clone()]).collect();
        let a = estimate_elbo(&data, &state, &one).unwrap();
        let b = estimate_elbo(&data, &state, &two).unwrap();
        assert!((a - b).abs() < 1e-12 * a.abs());
    }

    #[test]
    fn kl_gradient_of_prior_mean_matches_closed_form() {
        let data = tiny_data();
        let mut state = ModelState::init(&data, 1, 5).unwrap();
        state.prior.w_bar[(0, 0)] = 0.2;
        state.prior.log_eta2[(0, 0)] = 0.5f64.ln();
        let eps: EpsDraws = eps_shapes(&state).iter().map(|&(r, c)| vec![DMatrix::zeros(r, c)]).collect();
        let g = grad_elbo(&data, &state, &eps).unwrap();
        let lay = Layout::of(&state);
        // attribute "a" appears in both domains at row 0
        let expected = (state.variational.w_bar[0][(0, 0)] + state.variational.w_bar[1][(0, 0)] - 2.0 * 0.2) / 0.5;
        assert!((g[lay.prior_mean] - expected).abs() < 1e-12);
    }

    #[test]
    fn zero_iterations_return_init() {
        let data = tiny_data();
        let state = ModelState::init(&data, 1, 0).unwrap();
        let cfg = TrainConfig { max_iters: 0, ..TrainConfig::default() };
        let (out, trace) = fit(&data, &cfg, &state).unwrap();
        assert_eq!(out, state);
        assert!(trace.is_empty());
    }

    #[test]
    fn fit_is_deterministic_and_improves() {
        let data = tiny_data();
        let state = ModelState::init(&data, 2, 0).unwrap();
        let cfg = TrainConfig { max_iters: 300, learning_rate: 0.02, seed: 9, margin_draws: 64, ..TrainConfig::default() };
        let (a, ta) = fit(&data, &cfg, &state).unwrap();
        let (b, tb) = fit(&data, &cfg, &state).unwrap();
        assert_eq!(a.flatten(), b.flatten());
        assert_eq!(ta.entries, tb.entries);
        assert!(ta.margin().unwrap() > 0.0);
        assert!(ta.len() <= cfg.max_iters);
    }

    #[test]
    fn fixed_samples_ascend_monotonically_at_small_steps() {
        let data = tiny_data();
        let state = ModelState::init(&data, 1, 2).unwrap();
        let cfg = TrainConfig { max_iters: 200, learning_rate: 1e-3, fixed_eps: true, margin_draws: 0, ..TrainConfig::default() };
        let (_, trace) = fit(&data, &cfg, &state).unwrap();
        if trace.backoffs.is_empty() {
            for w in trace.entries.windows(2) {
                assert!(w[1].elbo >= w[0].elbo - 1e-9, "{} -> {}", w[0].elbo, w[1].elbo);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let data = tiny_data();
        let mut state = ModelState::init(&data, 2, 4).unwrap();
        let mut s = NormalStream::new(8, Stream::Init);
        let mut p = state.flatten();
        for x in p.iter_mut() {
            *x += 0.3 * s.next();
        }
        state.assign(&p);
        let eps = draw_eps(&mut NormalStream::new(8, Stream::Train), &state, 2);
        let g = grad_elbo(&data, &state, &eps).unwrap();
        let h = 1e-4;
        for i in 0..p.len() {
            let mut a = state.clone();
            let mut q = p.clone();
            q[i] += h;
            a.assign(&q);
            let up = estimate_elbo(&data, &a, &eps).unwrap();
            q[i] -= 2.0 * h;
            a.assign(&q);
            let down = estimate_elbo(&data, &a, &eps).unwrap();
            let fd = (up - down) / (2.0 * h);
            assert!((g[i] - fd).abs() <= 1e-4 * g[i].abs().max(fd.abs()) || (g[i] - fd).abs() < 1e-7, "param {i}: {} vs {fd}", g[i]);
        }
    }
}
