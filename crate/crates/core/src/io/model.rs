use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::dataset::Catalogue;
use super::{sha256_hex, write_atomic};
use crate::data::{AggregatedDataset, Normalization, TrainingData};
use crate::error::{Error, Result};
use crate::evaluation::{Fitted, Method};
use crate::inference::TrainTrace;
use crate::kernels::{KernelSet, SEKernel};
use crate::model::{ModelState, NoiseModel, VariationalWeights, WeightPrior};

/// Highest model-file version this build reads and the one it writes.
pub const FORMAT_VERSION: u32 = 1;

type Rows = Vec<Vec<f64>>;

fn rows(m: &DMatrix<f64>) -> Rows {
    (0..m.nrows()).map(|r| m.row(r).iter().copied().collect()).collect()
}

fn matrix(rows: &Rows, ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Parse(format!("matrix rows must have {ncols} entries")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |r, c| rows[r][c]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StateRecord {
    pub log_beta: Vec<f64>,
    pub prior_w_bar: Rows,
    pub prior_log_eta2: Rows,
    /// Catalogue indices of the attributes present in each domain.
    pub layout: Vec<Vec<usize>>,
    pub q_w_bar: Vec<Rows>,
    pub q_log_eta2: Vec<Rows>,
    pub log_sigma2: Vec<Vec<f64>>,
}

impl StateRecord {
    pub fn from_state(state: &ModelState) -> Self {
        StateRecord {
            log_beta: state.kernels.kernels.iter().map(|k| k.log_beta).collect(),
            prior_w_bar: rows(&state.prior.w_bar),
            prior_log_eta2: rows(&state.prior.log_eta2),
            layout: state.variational.attributes.clone(),
            q_w_bar: state.variational.w_bar.iter().map(rows).collect(),
            q_log_eta2: state.variational.log_eta2.iter().map(rows).collect(),
            log_sigma2: state.noise.log_sigma2.iter().map(|v| v.iter().copied().collect()).collect(),
        }
    }

    pub fn to_state(&self) -> Result<ModelState> {
        let l = self.log_beta.len();
        let kernels = KernelSet::new(self.log_beta.iter().map(|&b| SEKernel::from_log_beta(b)).collect())?;
        let domains = self.layout.len();
        if self.q_w_bar.len() != domains || self.q_log_eta2.len() != domains || self.log_sigma2.len() != domains {
            return Err(Error::Parse("per-domain parameter lists disagree with the layout".into()));
        }
        let q_w_bar = self.q_w_bar.iter().map(|m| matrix(m, l)).collect::<Result<Vec<_>>>()?;
        let q_log_eta2 = self.q_log_eta2.iter().map(|m| matrix(m, l)).collect::<Result<Vec<_>>>()?;
        for (v, attrs) in self.layout.iter().enumerate() {
            if q_w_bar[v].nrows() != attrs.len() || q_log_eta2[v].nrows() != attrs.len() || self.log_sigma2[v].len() != attrs.len() {
                return Err(Error::Parse(format!("domain {v}: parameter rows disagree with the layout")));
            }
        }
        Ok(ModelState {
            kernels,
            prior: WeightPrior { w_bar: matrix(&self.prior_w_bar, l)?, log_eta2: matrix(&self.prior_log_eta2, l)? },
            variational: VariationalWeights { attributes: self.layout.clone(), w_bar: q_w_bar, log_eta2: q_log_eta2 },
            noise: NoiseModel { log_sigma2: self.log_sigma2.iter().map(|v| DVector::from_vec(v.clone())).collect() },
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormEntry {
    pub domain: String,
    pub attribute: String,
    pub mean: f64,
    pub scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Provenance {
    pub seed: u64,
    /// Hash of the training datasets exactly as used.
    pub dataset_sha256: String,
    pub config_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceSummary {
    pub iterations: usize,
    pub best_iteration: Option<usize>,
    pub converged: bool,
    pub backoffs: Vec<usize>,
    pub init_elbo: Option<f64>,
    pub final_elbo: Option<f64>,
}

impl TraceSummary {
    pub fn of(trace: &TrainTrace) -> Self {
        TraceSummary {
            iterations: trace.len(),
            best_iteration: trace.best_iteration,
            converged: trace.converged,
            backoffs: trace.backoffs.clone(),
            init_elbo: trace.init_elbo,
            final_elbo: trace.final_elbo,
        }
    }
}

/// A fitted model with everything needed to predict from it again.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelFile {
    pub format_version: u32,
    pub method: Method,
    pub attributes: Vec<String>,
    pub domains: Vec<String>,
    /// Ids of the datasets the model was trained on.
    pub training_datasets: Vec<String>,
    pub normalizations: Vec<NormEntry>,
    pub state: StateRecord,
    pub provenance: Provenance,
    /// `(L, validation MAPE)` when the latent count was chosen by cross-validation.
    #[serde(default)]
    pub cv_errors: Vec<(usize, f64)>,
    pub trace: TraceSummary,
}

/// Hash of a dataset list; the order and every value matter.
pub fn datasets_sha256(datasets: &[AggregatedDataset]) -> Result<String> {
    Ok(sha256_hex(serde_json::to_string(datasets)?.as_bytes()))
}

impl ModelFile {
    /// `training` is the data view before any centroid conversion.
    pub fn new(fitted: &Fitted, training: &TrainingData, seed: u64, config_sha256: String, cv_errors: Vec<(usize, f64)>) -> Result<Self> {
        let datasets: Vec<AggregatedDataset> = training.datasets().cloned().collect();
        Ok(ModelFile {
            format_version: FORMAT_VERSION,
            method: fitted.method,
            attributes: training.attributes.clone(),
            domains: training.domains.iter().map(|d| d.domain.id.clone()).collect(),
            training_datasets: datasets.iter().map(|d| d.id.clone()).collect(),
            normalizations: training
                .normalizations()
                .into_iter()
                .map(|((domain, attribute), n)| NormEntry { domain, attribute, mean: n.mean, scale: n.scale })
                .collect(),
            state: StateRecord::from_state(&fitted.state),
            provenance: Provenance { seed, dataset_sha256: datasets_sha256(&datasets)?, config_sha256 },
            cv_errors,
            trace: TraceSummary::of(&fitted.trace),
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Parses a model document; versions newer than [`FORMAT_VERSION`] are refused.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: serde_json::Value = serde_json::from_str(text)?;
        let version = raw
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Parse("model file has no format_version".into()))?;
        if version > FORMAT_VERSION as u64 {
            return Err(Error::UnsupportedVersion { found: version.min(u32::MAX as u64) as u32, supported: FORMAT_VERSION });
        }
        Ok(serde_json::from_value(raw)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Rebuilds the training view from `catalogue` and checks it against the recorded hash.
    pub fn restore(&self, catalogue: &Catalogue) -> Result<Fitted> {
        let datasets = self
            .training_datasets
            .iter()
            .map(|id| catalogue.dataset(id).cloned().map_err(|_| Error::IncompatibleModel(format!("dataset {id} is missing"))))
            .collect::<Result<Vec<_>>>()?;
        if datasets_sha256(&datasets)? != self.provenance.dataset_sha256 {
            return Err(Error::IncompatibleModel("training datasets differ from the ones the model was fitted on".into()));
        }
        let domains = self
            .domains
            .iter()
            .map(|id| {
                catalogue
                    .domains
                    .iter()
                    .find(|d| &d.id == id)
                    .cloned()
                    .ok_or_else(|| Error::IncompatibleModel(format!("domain {id} is missing")))
            })
            .collect::<Result<Vec<_>>>()?;
        let norms: BTreeMap<(String, String), Normalization> = self
            .normalizations
            .iter()
            .map(|n| ((n.domain.clone(), n.attribute.clone()), Normalization { mean: n.mean, scale: n.scale }))
            .collect();
        let mut data = TrainingData::with_normalizations(self.attributes.clone(), domains, datasets, &norms)?;
        if self.method == Method::Slfm {
            data = data.to_centroids()?;
        }
        let state = self.state.to_state()?;
        state.check_compatible(&data)?;
        Ok(Fitted { method: self.method, state, trace: TrainTrace::default(), data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn newer_versions_fail_loudly() {
        let text = r#"{"format_version": 99}"#;
        assert_eq!(ModelFile::from_json(text), Err(Error::UnsupportedVersion { found: 99, supported: FORMAT_VERSION }));
        assert!(matches!(ModelFile::from_json("{}"), Err(Error::Parse(_))));
    }

    #[test]
    fn state_record_round_trip() {
        let state = ModelState {
            kernels: KernelSet::new(vec![SEKernel::new(0.3), SEKernel::new(1.7)]).unwrap(),
            prior: WeightPrior {
                w_bar: DMatrix::from_row_slice(2, 2, &[0.1, -0.2, 0.3, 1.0 / 3.0]),
                log_eta2: DMatrix::from_row_slice(2, 2, &[0.0, -1.0, 2.0, 1e-300]),
            },
            variational: VariationalWeights {
                attributes: vec![vec![0, 1], vec![1]],
                w_bar: vec![DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]), DMatrix::from_row_slice(1, 2, &[0.7, std::f64::consts::PI])],
                log_eta2: vec![DMatrix::from_element(2, 2, -4.6), DMatrix::from_element(1, 2, -2.3)],
            },
            noise: NoiseModel { log_sigma2: vec![DVector::from_vec(vec![-2.0, -3.0]), DVector::from_vec(vec![0.1])] },
        };
        let record = StateRecord::from_state(&state);
        let text = serde_json::to_string(&record).unwrap();
        let back: StateRecord = serde_json::from_str(&text).unwrap();
        let restored = back.to_state().unwrap();
        assert_eq!(restored, state);
        assert_eq!(restored.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>(), state.flatten().iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    }
}
