//! Domains, discretization grids, supports and partitions.
//!
//! A domain is an axis-aligned box discretized into a regular grid of cells.
//! Grid points are the cell centers; `origin` is the center of the first cell.
//! Supports are either half-open intervals `[lo, hi)` (one-dimensional domains
//! only) or explicit sets of grid cells (any dimension).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const EXTENT_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub origin: Vec<f64>,
    pub cell_size: Vec<f64>,
    pub shape: Vec<usize>,
}

impl GridSpec {
    pub fn new(origin: Vec<f64>, cell_size: Vec<f64>, shape: Vec<usize>) -> Result<Self> {
        let grid = GridSpec { origin, cell_size, shape };
        grid.check()?;
        Ok(grid)
    }

    /// Grid whose cells tile `extent` exactly, `shape[d]` cells along axis `d`.
    pub fn covering(extent: &[(f64, f64)], shape: &[usize]) -> Result<Self> {
        if extent.len() != shape.len() {
            return Err(Error::DimensionMismatch { expected: extent.len(), actual: shape.len() });
        }
        let cell_size: Vec<f64> =
            extent.iter().zip(shape).map(|(&(lo, hi), &n)| (hi - lo) / n as f64).collect();
        let origin = extent.iter().zip(&cell_size).map(|(&(lo, _), &h)| lo + 0.5 * h).collect();
        GridSpec::new(origin, cell_size, shape.to_vec())
    }

    fn check(&self) -> Result<()> {
        let d = self.origin.len();
        if d == 0 {
            return Err(Error::InvalidGeometry("grid dimension must be at least 1".into()));
        }
        if self.cell_size.len() != d || self.shape.len() != d {
            return Err(Error::DimensionMismatch {
                expected: d,
                actual: if self.cell_size.len() != d { self.cell_size.len() } else { self.shape.len() },
            });
        }
        if self.cell_size.iter().any(|&h| !(h.is_finite() && h > 0.0)) {
            return Err(Error::InvalidGeometry("cell sizes must be finite and positive".into()));
        }
        if self.origin.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidGeometry("grid origin must be finite".into()));
        }
        if self.shape.contains(&0) {
            return Err(Error::InvalidGeometry("grid shape entries must be positive".into()));
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.origin.len()
    }

    /// Total number of grid points.
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row-major multi-index (last axis fastest).
    pub fn multi_index(&self, mut index: usize) -> Vec<usize> {
        let mut idx = vec![0; self.shape.len()];
        for d in (0..self.shape.len()).rev() {
            idx[d] = index % self.shape[d];
            index /= self.shape[d];
        }
        idx
    }

    pub fn flat_index(&self, multi: &[usize]) -> usize {
        multi.iter().zip(&self.shape).fold(0, |acc, (&k, &n)| acc * n + k)
    }

    pub fn coordinate(&self, axis: usize, k: usize) -> f64 {
        self.origin[axis] + k as f64 * self.cell_size[axis]
    }

    pub fn point(&self, index: usize) -> Vec<f64> {
        self.multi_index(index)
            .into_iter()
            .enumerate()
            .map(|(d, k)| self.coordinate(d, k))
            .collect()
    }

    pub fn points(&self, indices: &[usize]) -> Vec<Vec<f64>> {
        indices.iter().map(|&i| self.point(i)).collect()
    }

    /// Bounding box of the cells (not of the centers).
    pub fn cell_extent(&self) -> Vec<(f64, f64)> {
        (0..self.dimension())
            .map(|d| {
                let h = self.cell_size[d];
                (self.origin[d] - 0.5 * h, self.origin[d] + (self.shape[d] as f64 - 0.5) * h)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Domain {
    pub id: String,
    pub extent: Vec<(f64, f64)>,
    pub grid: GridSpec,
}

impl Domain {
    pub fn new(id: impl Into<String>, extent: Vec<(f64, f64)>, grid: GridSpec) -> Result<Self> {
        let domain = Domain { id: id.into(), extent, grid };
        domain.check()?;
        Ok(domain)
    }

    /// Domain over `extent` with a grid of `shape` cells tiling it.
    pub fn with_cells(id: impl Into<String>, extent: Vec<(f64, f64)>, shape: &[usize]) -> Result<Self> {
        let grid = GridSpec::covering(&extent, shape)?;
        Domain::new(id, extent, grid)
    }

    fn check(&self) -> Result<()> {
        self.grid.check()?;
        if self.extent.len() != self.grid.dimension() {
            return Err(Error::DimensionMismatch { expected: self.extent.len(), actual: self.grid.dimension() });
        }
        for (d, &(lo, hi)) in self.extent.iter().enumerate() {
            if !(lo.is_finite() && hi.is_finite() && hi > lo) {
                return Err(Error::InvalidGeometry(format!(
                    "domain {} axis {d}: degenerate extent [{lo}, {hi}]",
                    self.id
                )));
            }
        }
        for (d, ((lo, hi), (glo, ghi))) in self.extent.iter().zip(self.grid.cell_extent()).enumerate() {
            let tol = EXTENT_TOL * (hi - lo).max(1.0);
            if (lo - glo).abs() > tol || (hi - ghi).abs() > tol {
                return Err(Error::InvalidGeometry(format!(
                    "domain {} axis {d}: grid cells span [{glo}, {ghi}] but extent is [{lo}, {hi}]",
                    self.id
                )));
            }
        }
        Ok(())
    }

    pub fn dimension(&self) -> usize {
        self.extent.len()
    }

    pub fn contains(&self, point: &[f64]) -> bool {
        point.len() == self.dimension()
            && point.iter().zip(&self.extent).all(|(&x, &(lo, hi))| x >= lo && x <= hi)
    }

    /// Largest side length of the extent.
    pub fn max_side(&self) -> f64 {
        self.extent.iter().map(|(lo, hi)| hi - lo).fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SupportBody {
    /// Half-open `[lo, hi)`; only valid in one-dimensional domains.
    Interval { lo: f64, hi: f64 },
    /// Sorted, duplicate-free grid-cell indices.
    CellSet(Vec<usize>),
    /// A single location; produced by point-observation baselines, never parsed from files.
    Point(Vec<f64>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Support {
    pub id: String,
    pub domain_id: String,
    pub body: SupportBody,
}

impl Support {
    pub fn interval(id: impl Into<String>, domain_id: impl Into<String>, lo: f64, hi: f64) -> Self {
        Support { id: id.into(), domain_id: domain_id.into(), body: SupportBody::Interval { lo, hi } }
    }

    /// Cell set; indices are sorted but duplicates are kept so validation can report them.
    pub fn cells(id: impl Into<String>, domain_id: impl Into<String>, mut cells: Vec<usize>) -> Self {
        cells.sort_unstable();
        Support { id: id.into(), domain_id: domain_id.into(), body: SupportBody::CellSet(cells) }
    }

    pub fn point(id: impl Into<String>, domain_id: impl Into<String>, x: Vec<f64>) -> Self {
        Support { id: id.into(), domain_id: domain_id.into(), body: SupportBody::Point(x) }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub attribute_id: String,
    pub domain_id: String,
    pub supports: Vec<Support>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "weights", rename_all = "snake_case")]
pub enum AggregationRule {
    Average,
    Sum,
    /// Per-member-point weights, in increasing grid-index order.
    Custom(Vec<f64>),
}

/// Grid points that fall inside `support`, as strictly increasing indices.
pub fn membership(support: &Support, grid: &GridSpec) -> Result<Vec<usize>> {
    match &support.body {
        SupportBody::Interval { lo, hi } => {
            if grid.dimension() != 1 {
                return Err(Error::DimensionMismatch { expected: 1, actual: grid.dimension() });
            }
            let members: Vec<usize> = (0..grid.shape[0])
                .filter(|&k| {
                    let x = grid.coordinate(0, k);
                    *lo <= x && x < *hi
                })
                .collect();
            if members.is_empty() {
                return Err(Error::EmptySupport { support: support.id.clone() });
            }
            Ok(members)
        }
        SupportBody::CellSet(cells) => {
            if cells.is_empty() {
                return Err(Error::EmptySupport { support: support.id.clone() });
            }
            if let Some(&bad) = cells.iter().find(|&&c| c >= grid.len()) {
                return Err(Error::OutOfBounds {
                    what: format!("support {}: cell index {bad} >= {}", support.id, grid.len()),
                });
            }
            let mut cells = cells.clone();
            cells.sort_unstable();
            cells.dedup();
            Ok(cells)
        }
        SupportBody::Point(_) => Err(Error::InvalidGeometry(format!(
            "support {} is a point and has no grid members",
            support.id
        ))),
    }
}

/// Discretized aggregation weights over the support's member points.
pub fn weight_vector(support: &Support, grid: &GridSpec, rule: &AggregationRule) -> Result<Vec<f64>> {
    let n = membership(support, grid)?.len();
    weights_for_count(n, rule)
}

pub(crate) fn weights_for_count(n: usize, rule: &AggregationRule) -> Result<Vec<f64>> {
    match rule {
        AggregationRule::Average => Ok(vec![1.0 / n as f64; n]),
        AggregationRule::Sum => Ok(vec![1.0; n]),
        AggregationRule::Custom(w) => {
            if w.len() != n {
                return Err(Error::LengthMismatch { expected: n, actual: w.len() });
            }
            if w.iter().any(|x| !x.is_finite()) {
                return Err(Error::InvalidGeometry("custom aggregation weights must be finite".into()));
            }
            Ok(w.clone())
        }
    }
}

/// Mean location of the support.
pub fn centroid(support: &Support, grid: &GridSpec) -> Result<Vec<f64>> {
    match &support.body {
        SupportBody::Interval { lo, hi } => {
            if !(hi > lo) {
                return Err(Error::DegenerateInterval { lo: *lo, hi: *hi });
            }
            Ok(vec![0.5 * (lo + hi)])
        }
        SupportBody::Point(x) => Ok(x.clone()),
        SupportBody::CellSet(_) => {
            let members = membership(support, grid)?;
            let d = grid.dimension();
            let mut c = vec![0.0; d];
            for p in grid.points(&members) {
                for (acc, x) in c.iter_mut().zip(p) {
                    *acc += x;
                }
            }
            c.iter_mut().for_each(|x| *x /= members.len() as f64);
            Ok(c)
        }
    }
}

fn check_support(domain: &Domain, support: &Support) -> Result<()> {
    if support.domain_id != domain.id {
        return Err(Error::InvalidGeometry(format!(
            "support {} belongs to domain {}, not {}",
            support.id, support.domain_id, domain.id
        )));
    }
    match &support.body {
        SupportBody::Interval { lo, hi } => {
            if domain.dimension() != 1 {
                return Err(Error::InvalidGeometry(format!(
                    "support {}: intervals require a one-dimensional domain",
                    support.id
                )));
            }
            if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
                return Err(Error::DegenerateInterval { lo: *lo, hi: *hi });
            }
            let (dlo, dhi) = domain.extent[0];
            let tol = EXTENT_TOL * (dhi - dlo).max(1.0);
            if *lo < dlo - tol || *hi > dhi + tol {
                return Err(Error::OutOfBounds {
                    what: format!("support {}: [{lo}, {hi}) outside [{dlo}, {dhi}]", support.id),
                });
            }
            Ok(())
        }
        SupportBody::CellSet(cells) => {
            if cells.is_empty() {
                return Err(Error::EmptySupport { support: support.id.clone() });
            }
            if let Some(&bad) = cells.iter().find(|&&c| c >= domain.grid.len()) {
                return Err(Error::OutOfBounds {
                    what: format!("support {}: cell index {bad} >= {}", support.id, domain.grid.len()),
                });
            }
            let mut sorted = cells.clone();
            sorted.sort_unstable();
            if sorted.windows(2).any(|w| w[0] == w[1]) {
                return Err(Error::InvalidGeometry(format!("support {}: duplicate cell index", support.id)));
            }
            Ok(())
        }
        SupportBody::Point(x) => {
            if !domain.contains(x) {
                return Err(Error::OutOfBounds { what: format!("support {}: point {x:?}", support.id) });
            }
            Ok(())
        }
    }
}

/// Checks every partition against `domain`: support validity and pairwise disjointness.
pub fn validate(domain: &Domain, partitions: &[Partition]) -> Result<()> {
    for partition in partitions {
        if partition.domain_id != domain.id {
            return Err(Error::InvalidGeometry(format!(
                "partition for attribute {} is declared on domain {}, not {}",
                partition.attribute_id, partition.domain_id, domain.id
            )));
        }
        if partition.supports.is_empty() {
            return Err(Error::EmptyPartition {
                partition: format!("{}/{}", partition.domain_id, partition.attribute_id),
            });
        }
        for support in &partition.supports {
            check_support(domain, support)?;
        }
        check_disjoint(domain, &partition.supports)?;
    }
    Ok(())
}

fn check_disjoint(domain: &Domain, supports: &[Support]) -> Result<()> {
    let mut intervals: Vec<(f64, f64, &str)> = supports
        .iter()
        .filter_map(|s| match s.body {
            SupportBody::Interval { lo, hi } => Some((lo, hi, s.id.as_str())),
            _ => None,
        })
        .collect();
    intervals.sort_by(|a, b| a.0.total_cmp(&b.0));
    for w in intervals.windows(2) {
        if w[1].0 < w[0].1 {
            return Err(Error::Overlap { first: w[0].2.to_string(), second: w[1].2.to_string() });
        }
    }

    let has_cells = supports.iter().any(|s| matches!(s.body, SupportBody::CellSet(_)));
    if has_cells {
        // Intervals are compared to cell sets through their member points.
        let mut owner: HashMap<usize, &str> = HashMap::new();
        for s in supports {
            let members = match &s.body {
                SupportBody::CellSet(c) => c.clone(),
                SupportBody::Interval { .. } => membership(s, &domain.grid).unwrap_or_default(),
                SupportBody::Point(_) => continue,
            };
            for c in members {
                if let Some(prev) = owner.insert(c, s.id.as_str()) {
                    if prev != s.id {
                        return Err(Error::Overlap { first: prev.to_string(), second: s.id.clone() });
                    }
                }
            }
        }
    }

    let points: Vec<(&Vec<f64>, &str)> = supports
        .iter()
        .filter_map(|s| match &s.body {
            SupportBody::Point(x) => Some((x, s.id.as_str())),
            _ => None,
        })
        .collect();
    for (i, a) in points.iter().enumerate() {
        if let Some(b) = points[i + 1..].iter().find(|b| b.0 == a.0) {
            return Err(Error::Overlap { first: a.1.to_string(), second: b.1.to_string() });
        }
    }
    Ok(())
}
