use std::path::Path;

use serde::{Deserialize, Serialize};

use super::write_atomic;
use crate::data::AggregatedDataset;
use crate::error::{Error, Result};
use crate::geometry::{validate, AggregationRule, Domain, GridSpec, Partition, Support, SupportBody};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainEntry {
    pub id: String,
    /// Redundant with the extent; checked when present.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dimension: Option<usize>,
    pub extent: Vec<(f64, f64)>,
    pub grid: GridSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationKind {
    Average,
    Sum,
    /// Every support carries its own `weights`.
    Custom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SupportEntry {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interval: Option<(f64, f64)>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cells: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetEntry {
    pub id: String,
    pub domain_id: String,
    pub attribute_id: String,
    pub aggregation: AggregationKind,
    pub supports: Vec<SupportEntry>,
    pub values: Vec<f64>,
}

/// On-disk form of domains, the attribute catalogue and aggregated observations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetFile {
    pub attributes: Vec<String>,
    pub domains: Vec<DomainEntry>,
    pub datasets: Vec<DatasetEntry>,
}

/// Parsed and validated contents of a [`DatasetFile`].
#[derive(Debug, Clone, PartialEq)]
pub struct Catalogue {
    pub attributes: Vec<String>,
    pub domains: Vec<Domain>,
    pub datasets: Vec<AggregatedDataset>,
}

impl Catalogue {
    pub fn dataset(&self, id: &str) -> Result<&AggregatedDataset> {
        self.datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("dataset {id} not found")))
    }
}

fn support_from(entry: &SupportEntry, domain_id: &str) -> Result<Support> {
    match (&entry.interval, &entry.cells) {
        (Some((lo, hi)), None) => Ok(Support::interval(&entry.id, domain_id, *lo, *hi)),
        (None, Some(cells)) => Ok(Support::cells(&entry.id, domain_id, cells.clone())),
        _ => Err(Error::Parse(format!("support {} needs exactly one of `interval` or `cells`", entry.id))),
    }
}

fn rule_from(kind: AggregationKind, entry: &SupportEntry) -> Result<AggregationRule> {
    match (kind, &entry.weights) {
        (AggregationKind::Average, None) => Ok(AggregationRule::Average),
        (AggregationKind::Sum, None) => Ok(AggregationRule::Sum),
        (AggregationKind::Custom, Some(w)) => Ok(AggregationRule::Custom(w.clone())),
        (AggregationKind::Custom, None) => {
            Err(Error::Parse(format!("support {}: custom aggregation requires `weights`", entry.id)))
        }
        (_, Some(_)) => Err(Error::Parse(format!("support {}: `weights` only apply to custom aggregation", entry.id))),
    }
}

impl DatasetFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    /// Builds geometry and datasets and checks them: known ids, finite values,
    /// matching lengths, and valid, pairwise disjoint supports.
    pub fn resolve(&self) -> Result<Catalogue> {
        let mut domains = Vec::with_capacity(self.domains.len());
        for d in &self.domains {
            if let Some(dim) = d.dimension {
                if dim != d.extent.len() {
                    return Err(Error::DimensionMismatch { expected: dim, actual: d.extent.len() });
                }
            }
            domains.push(Domain::new(&d.id, d.extent.clone(), d.grid.clone())?);
        }
        let mut datasets = Vec::with_capacity(self.datasets.len());
        for entry in &self.datasets {
            if !self.attributes.contains(&entry.attribute_id) {
                return Err(Error::InvalidConfig(format!(
                    "dataset {} refers to unknown attribute {}",
                    entry.id, entry.attribute_id
                )));
            }
            let domain = domains.iter().find(|d| d.id == entry.domain_id).ok_or_else(|| {
                Error::InvalidConfig(format!("dataset {} refers to unknown domain {}", entry.id, entry.domain_id))
            })?;
            if entry.values.len() != entry.supports.len() {
                return Err(Error::LengthMismatch { expected: entry.supports.len(), actual: entry.values.len() });
            }
            if let Some(i) = entry.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::Parse(format!("dataset {}: value {i} is not finite", entry.id)));
            }
            let supports = entry.supports.iter().map(|s| support_from(s, &entry.domain_id)).collect::<Result<Vec<_>>>()?;
            let rules = entry.supports.iter().map(|s| rule_from(entry.aggregation, s)).collect::<Result<Vec<_>>>()?;
            let partition = Partition { attribute_id: entry.attribute_id.clone(), domain_id: entry.domain_id.clone(), supports };
            validate(domain, std::slice::from_ref(&partition))?;
            datasets.push(AggregatedDataset { id: entry.id.clone(), partition, rules, values: entry.values.clone() });
        }
        for (i, ds) in datasets.iter().enumerate() {
            if datasets[..i].iter().any(|o| o.id == ds.id) {
                return Err(Error::InvalidConfig(format!("duplicate dataset id {}", ds.id)));
            }
        }
        Ok(Catalogue { attributes: self.attributes.clone(), domains, datasets })
    }

    /// Inverse of [`DatasetFile::resolve`]. Point supports cannot be written.
    pub fn from_parts(attributes: &[String], domains: &[Domain], datasets: &[AggregatedDataset]) -> Result<Self> {
        let domains = domains
            .iter()
            .map(|d| DomainEntry { id: d.id.clone(), dimension: Some(d.dimension()), extent: d.extent.clone(), grid: d.grid.clone() })
            .collect();
        let mut entries = Vec::with_capacity(datasets.len());
        for ds in datasets {
            let aggregation = match ds.rules.first() {
                Some(AggregationRule::Sum) => AggregationKind::Sum,
                Some(AggregationRule::Custom(_)) => AggregationKind::Custom,
                _ => AggregationKind::Average,
            };
            let mut supports = Vec::with_capacity(ds.partition.supports.len());
            for (s, rule) in ds.partition.supports.iter().zip(&ds.rules) {
                let weights = match (aggregation, rule) {
                    (AggregationKind::Custom, AggregationRule::Custom(w)) => Some(w.clone()),
                    (AggregationKind::Average, AggregationRule::Average) | (AggregationKind::Sum, AggregationRule::Sum) => None,
                    _ => return Err(Error::InvalidConfig(format!("dataset {} mixes aggregation rules", ds.id))),
                };
                let (interval, cells) = match &s.body {
                    SupportBody::Interval { lo, hi } => (Some((*lo, *hi)), None),
                    SupportBody::CellSet(c) => (None, Some(c.clone())),
                    SupportBody::Point(_) => {
                        return Err(Error::InvalidConfig(format!("support {} is a point and cannot be written", s.id)))
                    }
                };
                supports.push(SupportEntry { id: s.id.clone(), interval, cells, weights });
            }
            entries.push(DatasetEntry {
                id: ds.id.clone(),
                domain_id: ds.domain_id().to_string(),
                attribute_id: ds.attribute_id().to_string(),
                aggregation,
                supports,
                values: ds.values.clone(),
            });
        }
        Ok(DatasetFile { attributes: attributes.to_vec(), domains, datasets: entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TINY: &str = r#"{
        "attributes": ["a", "b"],
        "domains": [{"id": "d", "dimension": 1, "extent": [[0, 4]], "grid": {"origin": [0.5], "cell_size": [1], "shape": [4]}}],
        "datasets": [
            {"id": "da", "domain_id": "d", "attribute_id": "a", "aggregation": "average",
             "supports": [{"id": "a0", "interval": [0, 2]}, {"id": "a1", "interval": [2, 4]}], "values": [1.0, 2.0]},
            {"id": "db", "domain_id": "d", "attribute_id": "b", "aggregation": "sum",
             "supports": [{"id": "b0", "cells": [0, 1, 2, 3]}], "values": [5.0]}
        ]
    }"#;

    #[test]
    fn parses_and_round_trips() {
        let file = DatasetFile::from_json(TINY).unwrap();
        let cat = file.resolve().unwrap();
        assert_eq!(cat.datasets.len(), 2);
        assert_eq!(cat.datasets[1].rules[0], AggregationRule::Sum);
        let back = DatasetFile::from_parts(&cat.attributes, &cat.domains, &cat.datasets).unwrap();
        assert_eq!(back.resolve().unwrap(), cat);
    }

    #[test]
    fn overlapping_supports_are_rejected() {
        let text = TINY.replace("[2, 4]", "[1, 4]");
        let err = DatasetFile::from_json(&text).unwrap().resolve().unwrap_err();
        assert_eq!(err.kind(), "OverlapError");
    }

    #[test]
    fn unknown_attribute_and_bad_lengths() {
        let text = TINY.replace(r#""attribute_id": "b""#, r#""attribute_id": "z""#);
        assert!(matches!(DatasetFile::from_json(&text).unwrap().resolve(), Err(Error::InvalidConfig(_))));
        let text = TINY.replace("[5.0]", "[5.0, 6.0]");
        assert!(matches!(DatasetFile::from_json(&text).unwrap().resolve(), Err(Error::LengthMismatch { .. })));
    }

    #[test]
    fn support_needs_one_shape() {
        let text = TINY.replace(r#"{"id": "b0", "cells": [0, 1, 2, 3]}"#, r#"{"id": "b0"}"#);
        assert!(matches!(DatasetFile::from_json(&text).unwrap().resolve(), Err(Error::Parse(_))));
    }
}
