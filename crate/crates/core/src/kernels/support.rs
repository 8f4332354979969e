use std::collections::BTreeMap;

use super::histogram::offset_sq_dist;
use super::integrals::{phi_point_interval_parts, psi_pair};
use super::{sq_dist, SEKernel};
use crate::error::{Error, Result};
use crate::geometry::{membership, weights_for_count, AggregationRule, Domain, SupportBody, Support};

/// A support reduced to what the covariance computations need.
#[derive(Debug, Clone, PartialEq)]
pub enum ResolvedSupport {
    /// Average over `[lo, hi)` in a one-dimensional domain; handled by closed forms.
    Interval { lo: f64, hi: f64 },
    /// Weighted point set. `cells` holds grid multi-indices when the points are grid cells.
    Points { points: Vec<Vec<f64>>, weights: Vec<f64>, cells: Option<Vec<Vec<usize>>> },
}

impl ResolvedSupport {
    /// Dispatch: average-rule intervals keep their exact form, everything else goes to the grid.
    pub fn resolve(support: &Support, domain: &Domain, rule: &AggregationRule) -> Result<Self> {
        match (&support.body, rule) {
            (SupportBody::Interval { lo, hi }, AggregationRule::Average) if domain.dimension() == 1 => {
                if hi <= lo {
                    return Err(Error::DegenerateInterval { lo: *lo, hi: *hi });
                }
                Ok(ResolvedSupport::Interval { lo: *lo, hi: *hi })
            }
            (SupportBody::Point(x), _) => {
                if x.len() != domain.dimension() {
                    return Err(Error::DimensionMismatch { expected: domain.dimension(), actual: x.len() });
                }
                Ok(ResolvedSupport::point(x.clone()))
            }
            _ => {
                let members = membership(support, &domain.grid)?;
                let weights = weights_for_count(members.len(), rule)?;
                Ok(ResolvedSupport::Points {
                    points: domain.grid.points(&members),
                    weights,
                    cells: Some(members.iter().map(|&c| domain.grid.multi_index(c)).collect()),
                })
            }
        }
    }

    pub fn point(x: Vec<f64>) -> Self {
        ResolvedSupport::Points { points: vec![x], weights: vec![1.0], cells: None }
    }

    /// Total aggregation weight (1 for averages).
    pub fn weight_total(&self) -> f64 {
        match self {
            ResolvedSupport::Interval { .. } => 1.0,
            ResolvedSupport::Points { weights, .. } => weights.iter().sum(),
        }
    }

    /// Size used for area weighting: interval length or member count.
    pub fn measure(&self) -> f64 {
        match self {
            ResolvedSupport::Interval { lo, hi } => hi - lo,
            ResolvedSupport::Points { points, .. } => points.len() as f64,
        }
    }
}

/// Geometry of one support pair, precomputed so that covariances for any
/// kernel scale cost `O(|E|)` (distinct distances) or `O(1)` for intervals.
#[derive(Debug, Clone, PartialEq)]
pub enum PairCov {
    Intervals { a: f64, b: f64, c: f64, d: f64 },
    PointInterval { lo: f64, hi: f64, xs: Vec<f64>, ws: Vec<f64> },
    Distances { d2: Vec<f64>, w: Vec<f64> },
}

impl PairCov {
    /// `cell_size` is the grid spacing of the domain both supports live in.
    pub fn between(n: &ResolvedSupport, m: &ResolvedSupport, cell_size: &[f64]) -> Result<Self> {
        use ResolvedSupport::*;
        match (n, m) {
            (Interval { lo: a, hi: b }, Interval { lo: c, hi: d }) => Ok(PairCov::Intervals { a: *a, b: *b, c: *c, d: *d }),
            (Interval { lo, hi }, Points { points, weights, .. }) | (Points { points, weights, .. }, Interval { lo, hi }) => {
                if points.iter().any(|p| p.len() != 1) {
                    return Err(Error::DimensionMismatch { expected: 1, actual: points[0].len() });
                }
                Ok(PairCov::PointInterval {
                    lo: *lo,
                    hi: *hi,
                    xs: points.iter().map(|p| p[0]).collect(),
                    ws: weights.clone(),
                })
            }
            (Points { points: pn, weights: wn, cells: cn }, Points { points: pm, weights: wm, cells: cm }) => {
                let mut acc: BTreeMap<u64, f64> = BTreeMap::new();
                match (cn, cm) {
                    (Some(cn), Some(cm)) => {
                        for (i, p) in cn.iter().enumerate() {
                            for (j, q) in cm.iter().enumerate() {
                                *acc.entry(offset_sq_dist(cell_size, p, q).to_bits()).or_insert(0.0) += wn[i] * wm[j];
                            }
                        }
                    }
                    _ => {
                        for (i, p) in pn.iter().enumerate() {
                            for (j, q) in pm.iter().enumerate() {
                                if p.len() != q.len() {
                                    return Err(Error::DimensionMismatch { expected: p.len(), actual: q.len() });
                                }
                                *acc.entry(sq_dist(p, q).to_bits()).or_insert(0.0) += wn[i] * wm[j];
                            }
                        }
                    }
                }
                let (d2, w) = acc.into_iter().map(|(k, w)| (f64::from_bits(k), w)).unzip();
                Ok(PairCov::Distances { d2, w })
            }
        }
    }

    /// Number of kernel evaluations per call.
    pub fn cost(&self) -> usize {
        match self {
            PairCov::Intervals { .. } => 1,
            PairCov::PointInterval { xs, .. } => xs.len(),
            PairCov::Distances { d2, .. } => d2.len(),
        }
    }

    pub fn value(&self, kernel: &SEKernel) -> f64 {
        match self {
            PairCov::Intervals { a, b, c, d } => psi_pair(kernel, *a, *b, *c, *d).0 / ((b - a) * (d - c)),
            PairCov::PointInterval { lo, hi, xs, ws } => {
                let s: f64 = xs.iter().zip(ws).map(|(&x, &w)| w * phi_point_interval_parts(kernel, x, *lo, *hi).0).sum();
                s / (hi - lo)
            }
            PairCov::Distances { d2, w } => d2.iter().zip(w).map(|(&d, &w)| w * kernel.of_sq_dist(d)).sum(),
        }
    }

    /// Value and derivative with respect to the kernel's `log_beta`.
    pub fn value_dlogbeta(&self, kernel: &SEKernel) -> (f64, f64) {
        match self {
            PairCov::Intervals { a, b, c, d } => {
                let (v, g) = psi_pair(kernel, *a, *b, *c, *d);
                let norm = 1.0 / ((b - a) * (d - c));
                (v * norm, g * norm)
            }
            PairCov::PointInterval { lo, hi, xs, ws } => {
                let (mut v, mut g) = (0.0, 0.0);
                for (&x, &w) in xs.iter().zip(ws) {
                    let (pv, pg) = phi_point_interval_parts(kernel, x, *lo, *hi);
                    v += w * pv;
                    g += w * pg;
                }
                (v / (hi - lo), g / (hi - lo))
            }
            PairCov::Distances { d2, w } => d2.iter().zip(w).fold((0.0, 0.0), |(v, g), (&d, &w)| {
                let (kv, kg) = kernel.of_sq_dist_dlogbeta(d);
                (v + w * kv, g + w * kg)
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{double_integral_interval, integral_point_interval, support_cov_grid};

    #[test]
    fn interval_pair_is_normalized_double_integral() {
        let k = SEKernel::new(0.4);
        let n = ResolvedSupport::Interval { lo: 0.0, hi: 0.5 };
        let m = ResolvedSupport::Interval { lo: 0.25, hi: 1.0 };
        let pc = PairCov::between(&n, &m, &[0.01]).unwrap();
        let exact = double_integral_interval(&k, 0.0, 0.5, 0.25, 1.0).unwrap() / (0.5 * 0.75);
        assert!((pc.value(&k) - exact).abs() < 1e-15);
    }

    #[test]
    fn point_interval_pair() {
        let k = SEKernel::new(0.4);
        let n = ResolvedSupport::Interval { lo: 0.0, hi: 0.5 };
        let q = ResolvedSupport::point(vec![0.7]);
        let pc = PairCov::between(&q, &n, &[0.01]).unwrap();
        let exact = integral_point_interval(&k, 0.7, 0.0, 0.5).unwrap() / 0.5;
        assert!((pc.value(&k) - exact).abs() < 1e-15);
    }

    #[test]
    fn distances_match_naive_loop() {
        let d = Domain::with_cells("d", vec![(0.0, 1.0), (0.0, 2.0)], &[5, 8]).unwrap();
        let a = Support::cells("a", "d", vec![0, 1, 2, 9, 10]);
        let b = Support::cells("b", "d", vec![20, 21, 30, 39]);
        let custom = AggregationRule::Custom(vec![0.1, 0.2, 0.3, 0.4]);
        let ra = ResolvedSupport::resolve(&a, &d, &AggregationRule::Average).unwrap();
        let rb = ResolvedSupport::resolve(&b, &d, &custom).unwrap();
        let pc = PairCov::between(&ra, &rb, &d.grid.cell_size).unwrap();
        let k = SEKernel::new(0.3);
        let (ResolvedSupport::Points { points: pa, weights: wa, .. }, ResolvedSupport::Points { points: pb, weights: wb, .. }) = (&ra, &rb) else {
            panic!("grid supports resolve to points");
        };
        let naive = support_cov_grid(&k, wa, pa, wb, pb).unwrap();
        assert!((pc.value(&k) - naive).abs() <= 1e-13 * naive.abs());
    }

    #[test]
    fn average_intervals_resolve_exactly_but_sums_use_grid() {
        let d = Domain::with_cells("d", vec![(0.0, 1.0)], &[10]).unwrap();
        let s = Support::interval("a", "d", 0.0, 0.5);
        assert_eq!(ResolvedSupport::resolve(&s, &d, &AggregationRule::Average).unwrap(), ResolvedSupport::Interval { lo: 0.0, hi: 0.5 });
        match ResolvedSupport::resolve(&s, &d, &AggregationRule::Sum).unwrap() {
            ResolvedSupport::Points { weights, .. } => assert_eq!(weights, vec![1.0; 5]),
            other => panic!("unexpected {other:?}"),
        }
    }
}
