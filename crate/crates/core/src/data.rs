//! Aggregated datasets and the resolved training view consumed by the model.

use std::collections::BTreeMap;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{centroid, validate, AggregationRule, Domain, Partition, Support};
use crate::kernels::{PairCov, ResolvedSupport};

/// Affine map between original units and the zero-mean, unit-variance units the model works in.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: f64,
    pub scale: f64,
}

impl Normalization {
    pub const IDENTITY: Normalization = Normalization { mean: 0.0, scale: 1.0 };

    /// Sample mean and population standard deviation; a zero spread keeps unit scale.
    pub fn fit(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self::IDENTITY;
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let scale = if var > 0.0 && var.is_finite() { var.sqrt() } else { 1.0 };
        Normalization { mean, scale }
    }

    pub fn normalize(&self, y: f64) -> f64 {
        (y - self.mean) / self.scale
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.scale + self.mean
    }

    pub fn denormalize_variance(&self, v: f64) -> f64 {
        v * self.scale * self.scale
    }
}

/// Observed values of one attribute over one partition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregatedDataset {
    pub id: String,
    pub partition: Partition,
    /// One rule per support.
    pub rules: Vec<AggregationRule>,
    pub values: Vec<f64>,
}

impl AggregatedDataset {
    pub fn new(id: impl Into<String>, partition: Partition, rule: AggregationRule, values: Vec<f64>) -> Self {
        let rules = vec![rule; partition.supports.len()];
        AggregatedDataset { id: id.into(), partition, rules, values }
    }

    pub fn domain_id(&self) -> &str {
        &self.partition.domain_id
    }

    pub fn attribute_id(&self) -> &str {
        &self.partition.attribute_id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// One attribute's observations inside a domain.
#[derive(Debug, Clone)]
pub struct Block {
    /// Index into the global attribute catalogue.
    pub attribute: usize,
    pub dataset: AggregatedDataset,
    pub norm: Normalization,
    /// First row of this block in the domain's observation vector.
    pub offset: usize,
}

impl Block {
    pub fn len(&self) -> usize {
        self.dataset.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct DomainData {
    pub domain: Domain,
    /// Attributes present in this domain, in catalogue order.
    pub blocks: Vec<Block>,
    pub(crate) supports: Vec<ResolvedSupport>,
    pub(crate) block_of: Vec<usize>,
    /// Normalized observations, blocks stacked in order.
    pub y: DVector<f64>,
    /// Packed upper triangle (row-major, `i <= j`) of support-pair geometry.
    pub(crate) pairs: Vec<PairCov>,
}

impl DomainData {
    pub fn num_obs(&self) -> usize {
        self.y.len()
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_of(&self, row: usize) -> usize {
        self.block_of[row]
    }

    /// Block index holding catalogue attribute `attribute`.
    pub fn block_for(&self, attribute: usize) -> Option<usize> {
        self.blocks.iter().position(|b| b.attribute == attribute)
    }

    pub fn supports(&self) -> &[ResolvedSupport] {
        &self.supports
    }

    pub(crate) fn pair(&self, i: usize, j: usize) -> &PairCov {
        let (i, j) = if i <= j { (i, j) } else { (j, i) };
        let n = self.supports.len();
        // Rows before `i` hold n, n-1, ..., n-i+1 entries.
        &self.pairs[i * n - i * i.saturating_sub(1) / 2 + (j - i)]
    }

    fn build(domain: Domain, blocks: Vec<Block>) -> Result<Self> {
        let mut supports = Vec::new();
        let mut block_of = Vec::new();
        let mut y = Vec::new();
        for (b, block) in blocks.iter().enumerate() {
            for ((support, rule), &value) in
                block.dataset.partition.supports.iter().zip(&block.dataset.rules).zip(&block.dataset.values)
            {
                supports.push(ResolvedSupport::resolve(support, &domain, rule)?);
                block_of.push(b);
                y.push(block.norm.normalize(value));
            }
        }
        let n = supports.len();
        let mut pairs = Vec::with_capacity(n * (n + 1) / 2);
        for i in 0..n {
            for j in i..n {
                pairs.push(PairCov::between(&supports[i], &supports[j], &domain.grid.cell_size)?);
            }
        }
        Ok(DomainData { domain, blocks, supports, block_of, y: DVector::from_vec(y), pairs })
    }
}

/// Everything the model is trained on: a global attribute catalogue and per-domain observations.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub attributes: Vec<String>,
    pub domains: Vec<DomainData>,
}

impl TrainingData {
    /// Validates geometry and values, groups datasets by domain, and normalizes each `(v, s)`.
    ///
    /// At most one dataset per `(domain, attribute)`. Domains keep the given order;
    /// blocks within a domain follow the catalogue order.
    pub fn new(attributes: Vec<String>, domains: Vec<Domain>, datasets: Vec<AggregatedDataset>) -> Result<Self> {
        Self::with_normalizations(attributes, domains, datasets, &BTreeMap::new())
    }

    /// Like [`TrainingData::new`] but reusing known transforms, keyed by `(domain id, attribute id)`.
    pub fn with_normalizations(
        attributes: Vec<String>,
        domains: Vec<Domain>,
        datasets: Vec<AggregatedDataset>,
        norms: &BTreeMap<(String, String), Normalization>,
    ) -> Result<Self> {
        let mut seen = BTreeMap::new();
        for (i, a) in attributes.iter().enumerate() {
            if seen.insert(a.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate attribute id {a}")));
            }
        }
        for (i, d) in domains.iter().enumerate() {
            if domains[..i].iter().any(|o| o.id == d.id) {
                return Err(Error::InvalidConfig(format!("duplicate domain id {}", d.id)));
            }
        }
        let mut per_domain: Vec<BTreeMap<usize, AggregatedDataset>> = vec![BTreeMap::new(); domains.len()];
        for ds in datasets {
            let v = domains
                .iter()
                .position(|d| d.id == ds.domain_id())
                .ok_or_else(|| Error::InvalidConfig(format!("dataset {} refers to unknown domain {}", ds.id, ds.domain_id())))?;
            let s = *seen
                .get(ds.attribute_id())
                .ok_or_else(|| Error::InvalidConfig(format!("dataset {} refers to unknown attribute {}", ds.id, ds.attribute_id())))?;
            check_dataset(&domains[v], &ds)?;
            if let Some(prev) = per_domain[v].get(&s) {
                return Err(Error::InvalidConfig(format!(
                    "datasets {} and {} both observe attribute {} in domain {}",
                    prev.id,
                    ds.id,
                    ds.attribute_id(),
                    ds.domain_id()
                )));
            }
            per_domain[v].insert(s, ds);
        }

        let mut out = Vec::with_capacity(domains.len());
        for (domain, sets) in domains.into_iter().zip(per_domain) {
            let mut offset = 0;
            let mut blocks = Vec::new();
            for (attribute, dataset) in sets {
                let key = (domain.id.clone(), attributes[attribute].clone());
                let norm = norms.get(&key).copied().unwrap_or_else(|| Normalization::fit(&dataset.values));
                let len = dataset.len();
                blocks.push(Block { attribute, dataset, norm, offset });
                offset += len;
            }
            out.push(DomainData::build(domain, blocks)?);
        }
        Ok(TrainingData { attributes, domains: out })
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    /// `S = sum_v |S_v|`, the number of (domain, attribute) datasets.
    pub fn num_datasets(&self) -> usize {
        self.domains.iter().map(|d| d.blocks.len()).sum()
    }

    pub fn domain_index(&self, id: &str) -> Option<usize> {
        self.domains.iter().position(|d| d.domain.id == id)
    }

    pub fn attribute_index(&self, id: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == id)
    }

    /// Catalogue indices of the attributes present in each domain.
    pub fn layout(&self) -> Vec<Vec<usize>> {
        self.domains.iter().map(|d| d.blocks.iter().map(|b| b.attribute).collect()).collect()
    }

    pub fn datasets(&self) -> impl Iterator<Item = &AggregatedDataset> {
        self.domains.iter().flat_map(|d| d.blocks.iter().map(|b| &b.dataset))
    }

    pub fn normalizations(&self) -> BTreeMap<(String, String), Normalization> {
        let mut out = BTreeMap::new();
        for d in &self.domains {
            for b in &d.blocks {
                out.insert((d.domain.id.clone(), self.attributes[b.attribute].clone()), b.norm);
            }
        }
        out
    }

    /// Largest side length over all domains.
    pub fn max_extent(&self) -> f64 {
        self.domains.iter().map(|d| d.domain.max_side()).fold(0.0, f64::max)
    }

    fn rebuild(&self, datasets: Vec<AggregatedDataset>) -> Result<Self> {
        let domains = self.domains.iter().map(|d| d.domain.clone()).collect();
        Self::with_normalizations(self.attributes.clone(), domains, datasets, &self.normalizations())
    }

    /// Same data with observation `row` of domain `v` removed; transforms are kept.
    /// A dataset emptied by the removal stays as an empty block so model shapes are unchanged.
    pub fn without_observation(&self, v: usize, row: usize) -> Result<Self> {
        let dd = &self.domains[v];
        let b = dd.block_of(row);
        let local = row - dd.blocks[b].offset;
        let mut out = self.clone();
        let mut dataset = dd.blocks[b].dataset.clone();
        dataset.partition.supports.remove(local);
        dataset.rules.remove(local);
        dataset.values.remove(local);
        let mut blocks = dd.blocks.clone();
        blocks[b].dataset = dataset;
        let mut offset = 0;
        for block in &mut blocks {
            block.offset = offset;
            offset += block.len();
        }
        out.domains[v] = DomainData::build(dd.domain.clone(), blocks)?;
        Ok(out)
    }

    /// Every support replaced by its centroid point; observations become point values.
    pub fn to_centroids(&self) -> Result<Self> {
        let mut datasets = Vec::new();
        for d in &self.domains {
            for b in &d.blocks {
                let mut ds = b.dataset.clone();
                ds.partition.supports = ds
                    .partition
                    .supports
                    .iter()
                    .map(|s| Ok(Support::point(s.id.clone(), s.domain_id.clone(), centroid(s, &d.domain.grid)?)))
                    .collect::<Result<_>>()?;
                ds.rules = vec![AggregationRule::Average; ds.values.len()];
                datasets.push(ds);
            }
        }
        self.rebuild(datasets)
    }

    /// Restriction to the datasets accepted by `keep`; domains without data are dropped.
    pub fn restrict<F: Fn(&str, &str) -> bool>(&self, keep: F) -> Result<Self> {
        let datasets: Vec<AggregatedDataset> =
            self.datasets().filter(|ds| keep(ds.domain_id(), ds.attribute_id())).cloned().collect();
        let domains: Vec<Domain> = self
            .domains
            .iter()
            .filter(|d| datasets.iter().any(|ds| ds.domain_id() == d.domain.id))
            .map(|d| d.domain.clone())
            .collect();
        let attributes: Vec<String> = self
            .attributes
            .iter()
            .filter(|a| datasets.iter().any(|ds| ds.attribute_id() == a.as_str()))
            .cloned()
            .collect();
        Self::with_normalizations(attributes, domains, datasets, &self.normalizations())
    }
}

fn check_dataset(domain: &Domain, ds: &AggregatedDataset) -> Result<()> {
    validate(domain, std::slice::from_ref(&ds.partition))?;
    let n = ds.partition.supports.len();
    if ds.values.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: ds.values.len() });
    }
    if ds.rules.len() != n {
        return Err(Error::LengthMismatch { expected: n, actual: ds.rules.len() });
    }
    if let Some(i) = ds.values.iter().position(|v| !v.is_finite()) {
        return Err(Error::InvalidConfig(format!("dataset {}: value {i} is not finite", ds.id)));
    }
    Ok(())
}
