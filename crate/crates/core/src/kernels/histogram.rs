use std::collections::BTreeMap;

use super::{sq_dist, SEKernel};
use crate::error::{Error, Result};
use crate::geometry::GridSpec;

/// Pair counts per distinct squared distance between two point sets.
///
/// Keys are the bit patterns of the squared distances; for non-negative
/// floats bit order equals numeric order, so iteration is ascending.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceHistogram {
    counts: BTreeMap<u64, u64>,
    pairs: u64,
}

impl DistanceHistogram {
    /// Builds from explicit counts, checking they account for every pair.
    pub fn from_counts(counts: BTreeMap<u64, u64>, size_n: usize, size_m: usize) -> Result<Self> {
        let expected = (size_n * size_m) as u64;
        let total: u64 = counts.values().sum();
        if total != expected {
            return Err(Error::LengthMismatch { expected: expected as usize, actual: total as usize });
        }
        if counts.keys().any(|&k| !f64::from_bits(k).is_finite() || f64::from_bits(k) < 0.0) {
            return Err(Error::InvalidGeometry("histogram keys must be finite squared distances".into()));
        }
        Ok(DistanceHistogram { counts, pairs: expected })
    }

    pub fn from_points(points_n: &[Vec<f64>], points_m: &[Vec<f64>]) -> Self {
        let mut counts = BTreeMap::new();
        for p in points_n {
            for q in points_m {
                *counts.entry(sq_dist(p, q).to_bits()).or_insert(0) += 1;
            }
        }
        DistanceHistogram { counts, pairs: (points_n.len() * points_m.len()) as u64 }
    }

    /// Squared distances from integer cell offsets, so equal offsets give identical keys.
    pub fn from_cells(grid: &GridSpec, cells_n: &[usize], cells_m: &[usize]) -> Self {
        let mi_n: Vec<Vec<usize>> = cells_n.iter().map(|&c| grid.multi_index(c)).collect();
        let mi_m: Vec<Vec<usize>> = cells_m.iter().map(|&c| grid.multi_index(c)).collect();
        let mut counts = BTreeMap::new();
        for p in &mi_n {
            for q in &mi_m {
                *counts.entry(offset_sq_dist(&grid.cell_size, p, q).to_bits()).or_insert(0) += 1;
            }
        }
        DistanceHistogram { counts, pairs: (cells_n.len() * cells_m.len()) as u64 }
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    pub fn total_pairs(&self) -> u64 {
        self.pairs
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, u64)> + '_ {
        self.counts.iter().map(|(&k, &c)| (f64::from_bits(k), c))
    }
}

pub(crate) fn offset_sq_dist(cell_size: &[f64], p: &[usize], q: &[usize]) -> f64 {
    cell_size
        .iter()
        .zip(p.iter().zip(q))
        .map(|(&h, (&a, &b))| {
            let t = a.abs_diff(b) as f64 * h;
            t * t
        })
        .sum()
}

/// `sum_i sum_j w_i w'_j k(p_i, p'_j)`; the naive double loop.
pub fn support_cov_grid(
    kernel: &SEKernel,
    weights_n: &[f64],
    points_n: &[Vec<f64>],
    weights_m: &[f64],
    points_m: &[Vec<f64>],
) -> Result<f64> {
    if weights_n.len() != points_n.len() {
        return Err(Error::LengthMismatch { expected: points_n.len(), actual: weights_n.len() });
    }
    if weights_m.len() != points_m.len() {
        return Err(Error::LengthMismatch { expected: points_m.len(), actual: weights_m.len() });
    }
    if points_n.is_empty() || points_m.is_empty() {
        return Err(Error::LengthMismatch { expected: 1, actual: 0 });
    }
    let mut total = 0.0;
    for (wi, p) in weights_n.iter().zip(points_n) {
        let mut row = 0.0;
        for (wj, q) in weights_m.iter().zip(points_m) {
            if p.len() != q.len() {
                return Err(Error::DimensionMismatch { expected: p.len(), actual: q.len() });
            }
            row += wj * kernel.of_sq_dist(sq_dist(p, q));
        }
        total += wi * row;
    }
    Ok(total)
}

/// Average-weight support covariance from a distance histogram, `O(|E|)`.
pub fn support_cov_bucketed(kernel: &SEKernel, histogram: &DistanceHistogram, norm_n: f64, norm_m: f64) -> f64 {
    let sum: f64 = histogram.iter().map(|(d2, c)| c as f64 * kernel.of_sq_dist(d2)).sum();
    norm_n * norm_m * sum
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::double_integral_interval;

    #[test]
    fn coincident_pairs() {
        let k = SEKernel::new(0.7);
        let mut counts = BTreeMap::new();
        counts.insert(0.0f64.to_bits(), 4);
        let h = DistanceHistogram::from_counts(counts, 2, 2).unwrap();
        assert_eq!(support_cov_bucketed(&k, &h, 0.5, 0.5), 1.0);
    }

    #[test]
    fn wrong_total_rejected() {
        let mut counts = BTreeMap::new();
        counts.insert(1.0f64.to_bits(), 3);
        assert!(DistanceHistogram::from_counts(counts, 2, 2).is_err());
    }

    #[test]
    fn single_points() {
        let k = SEKernel::new(1.0);
        let p = vec![vec![0.0, 0.0]];
        assert_eq!(support_cov_grid(&k, &[1.0], &p, &[1.0], &p).unwrap(), 1.0);
        let q = vec![vec![1.0, 0.0]];
        let v = support_cov_grid(&k, &[1.0], &p, &[1.0], &q).unwrap();
        assert!((v - 0.6065306597126334).abs() < 1e-12);
        assert!(support_cov_grid(&k, &[1.0, 2.0], &p, &[1.0], &q).is_err());
    }

    #[test]
    fn grid_sum_approaches_closed_form() {
        let k = SEKernel::new(0.3);
        let (a, b, c, d) = (0.1, 0.4, 0.3, 0.9);
        let exact = double_integral_interval(&k, a, b, c, d).unwrap() / ((b - a) * (d - c));
        let mut errors = Vec::new();
        for per_unit in [250usize, 500, 1000, 2000] {
            let h = 1.0 / per_unit as f64;
            let pts = |lo: f64, hi: f64| -> Vec<Vec<f64>> {
                (0..per_unit).map(|i| (i as f64 + 0.5) * h).filter(|&x| lo <= x && x < hi).map(|x| vec![x]).collect()
            };
            let (pn, pm) = (pts(a, b), pts(c, d));
            let wn = vec![1.0 / pn.len() as f64; pn.len()];
            let wm = vec![1.0 / pm.len() as f64; pm.len()];
            let approx = support_cov_grid(&k, &wn, &pn, &wm, &pm).unwrap();
            errors.push((approx - exact).abs());
        }
        assert!(errors[2] < 1e-4, "{errors:?}");
        assert!(errors.windows(2).all(|w| w[1] <= w[0] * 1.0001), "{errors:?}");
    }

    #[test]
    fn cell_histogram_counts_all_pairs() {
        let grid = GridSpec::new(vec![0.5, 0.5], vec![1.0, 2.0], vec![4, 5]).unwrap();
        let h = DistanceHistogram::from_cells(&grid, &[0, 1, 6, 7], &[3, 8, 19]);
        assert_eq!(h.iter().map(|(_, c)| c).sum::<u64>(), 12);
        assert_eq!(h.total_pairs(), 12);
    }
}
