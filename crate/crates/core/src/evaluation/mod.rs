//! Refinement metric, latent-count selection, synthetic data and the experiment harness.

mod experiment;
mod synth;

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{centroid_partition, fit_agp, fit_slfm, BaselineKind};
use crate::data::TrainingData;
use crate::error::{Error, Result};
use crate::geometry::{AggregationRule, Partition};
use crate::inference::{fit, TrainConfig, TrainTrace};
use crate::model::ModelState;
use crate::prediction::{predict_supports, SupportPrediction};

pub use experiment::{coregionalization, run_experiment, ExperimentSpec, Report, RunResult};
pub use synth::{synth_generate, SynthConfig, SynthDomain, SynthOutput, SynthPartition, WeightSpec};

/// Mean absolute percentage error.
pub fn mape(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch { expected: y_true.len(), actual: y_pred.len() });
    }
    if y_true.is_empty() {
        return Err(Error::Precondition("MAPE of an empty set".into()));
    }
    let zeros: Vec<usize> = y_true.iter().enumerate().filter(|(_, y)| **y == 0.0).map(|(i, _)| i).collect();
    if !zeros.is_empty() {
        return Err(Error::ZeroTruth { indices: zeros });
    }
    let sum: f64 = y_true.iter().zip(y_pred).map(|(t, p)| ((t - p) / t).abs()).sum();
    Ok(sum / y_true.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Agp,
    Slfm,
    Amogp,
    AmogpTrans,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Agp, Method::Slfm, Method::Amogp, Method::AmogpTrans];

    pub fn name(&self) -> &'static str {
        match self {
            Method::Agp => "agp",
            Method::Slfm => "slfm",
            Method::Amogp => "amogp",
            Method::AmogpTrans => "amogp-trans",
        }
    }

    pub fn baseline(&self) -> Option<BaselineKind> {
        match self {
            Method::Agp => Some(BaselineKind::Agp),
            Method::Slfm => Some(BaselineKind::Slfm),
            _ => None,
        }
    }

    /// The data each method is allowed to see: the target dataset alone, the
    /// target domain, or every domain.
    pub fn training_view(&self, data: &TrainingData, target: &Target) -> Result<TrainingData> {
        let view = match self {
            Method::Agp => data.restrict(|v, s| v == target.domain && s == target.attribute)?,
            Method::Slfm | Method::Amogp => data.restrict(|v, _| v == target.domain)?,
            Method::AmogpTrans => data.clone(),
        };
        target.locate(&view)?;
        Ok(view)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown method {s:?}; expected agp, slfm, amogp or amogp-trans")))
    }
}

/// The attribute to refine and the domain it lives in.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Target {
    pub domain: String,
    pub attribute: String,
}

impl Target {
    /// `(domain index, block index)` in `data`.
    pub fn locate(&self, data: &TrainingData) -> Result<(usize, usize)> {
        let v = data
            .domain_index(&self.domain)
            .ok_or_else(|| Error::Precondition(format!("target domain {} has no data", self.domain)))?;
        let s = data
            .attribute_index(&self.attribute)
            .ok_or_else(|| Error::Precondition(format!("target attribute {} has no data", self.attribute)))?;
        let b = data.domains[v]
            .block_for(s)
            .ok_or_else(|| Error::Precondition(format!("attribute {} is not observed in domain {}", self.attribute, self.domain)))?;
        Ok((v, b))
    }
}

/// Number of latent processes: fixed, or chosen by leave-one-out validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LatentChoice {
    Fixed(usize),
    Auto(CvKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CvKeyword {
    #[serde(rename = "cv")]
    Cv,
}

impl Default for LatentChoice {
    fn default() -> Self {
        LatentChoice::Auto(CvKeyword::Cv)
    }
}

impl FromStr for LatentChoice {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cv" {
            return Ok(LatentChoice::Auto(CvKeyword::Cv));
        }
        match s.parse::<usize>() {
            Ok(n) if n > 0 => Ok(LatentChoice::Fixed(n)),
            _ => Err(Error::InvalidConfig(format!("latents must be a positive integer or \"cv\", got {s:?}"))),
        }
    }
}

/// A trained model together with the data view it was trained on.
#[derive(Debug, Clone)]
pub struct Fitted {
    pub method: Method,
    pub state: ModelState,
    pub trace: TrainTrace,
    /// Training data as the model saw it (centroids for the centroid baseline).
    pub data: TrainingData,
}

impl Fitted {
    pub fn predict(&self, target: &Partition, rule: &AggregationRule, t_p: usize, seed: u64) -> Result<SupportPrediction> {
        if self.method == Method::Slfm {
            let v = self
                .data
                .domain_index(&target.domain_id)
                .ok_or_else(|| Error::Precondition(format!("domain {} has no data", target.domain_id)))?;
            let points = centroid_partition(target, &self.data.domains[v].domain)?;
            predict_supports(&points, &AggregationRule::Average, &self.state, &self.data, t_p, seed)
        } else {
            predict_supports(target, rule, &self.state, &self.data, t_p, seed)
        }
    }
}

/// Trains `method` on an already restricted `view`; `warm` replaces the default initialization.
pub fn fit_method(method: Method, view: &TrainingData, latents: usize, config: &TrainConfig, warm: Option<&ModelState>) -> Result<Fitted> {
    match (method, warm) {
        (Method::Agp, None) => {
            let (state, trace) = fit_agp(view, config)?;
            Ok(Fitted { method, state, trace, data: view.clone() })
        }
        (Method::Slfm, None) => {
            let (state, trace, data) = fit_slfm(view, latents, config)?;
            Ok(Fitted { method, state, trace, data })
        }
        _ => {
            let data = if method == Method::Slfm { view.to_centroids()? } else { view.clone() };
            let init = match warm {
                Some(s) => s.clone(),
                None => ModelState::init(&data, latents, config.seed)?,
            };
            let (state, trace) = fit(&data, config, &init)?;
            Ok(Fitted { method, state, trace, data })
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvConfig {
    /// Refit every fold from scratch instead of warm-starting from the full fit.
    pub exact_refit: bool,
    /// Iterations of a warm-started fold refit, as a fraction of `max_iters`.
    pub warm_fraction: f64,
    /// Mixture size for fold predictions.
    pub t_p: usize,
    /// Candidate latent counts; defaults to `1..=S`.
    pub candidates: Option<Vec<usize>>,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig { exact_refit: false, warm_fraction: 0.2, t_p: 100, candidates: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub chosen: usize,
    /// `(L, validation MAPE)` in candidate order.
    pub errors: Vec<(usize, f64)>,
}

/// Index of the smallest error; earlier entries win ties.
pub fn argmin_first(errors: &[(usize, f64)]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for &(l, e) in errors {
        if best.is_none_or(|(_, b)| e < b) {
            best = Some((l, e));
        }
    }
    best.map(|(l, _)| l)
}

/// Leave-one-out choice of `L` over the target's coarse observations.
///
/// Only the data in `view` is read; held-out values come from the target block.
pub fn cv_select_latents(method: Method, view: &TrainingData, target: &Target, train: &TrainConfig, cv: &CvConfig) -> Result<CvResult> {
    let mut candidates = cv.candidates.clone().unwrap_or_else(|| (1..=view.num_datasets()).collect());
    if method == Method::Agp {
        candidates = vec![1];
    }
    if candidates.is_empty() || candidates.contains(&0) {
        return Err(Error::InvalidConfig("latent candidates must be positive and non-empty".into()));
    }
    if candidates.len() == 1 {
        return Ok(CvResult { chosen: candidates[0], errors: Vec::new() });
    }
    let (v, b) = target.locate(view)?;
    let block = &view.domains[v].blocks[b];
    let rows: Vec<usize> = (block.offset..block.offset + block.len()).collect();
    let mut errors = Vec::with_capacity(candidates.len());
    for &l in &candidates {
        let full = if cv.exact_refit { None } else { Some(fit_method(method, view, l, train, None)?) };
        let fold_config = if cv.exact_refit {
            train.clone()
        } else {
            TrainConfig { max_iters: ((train.max_iters as f64) * cv.warm_fraction).ceil() as usize, margin_draws: 0, ..train.clone() }
        };
        let outcomes: Vec<Result<(f64, f64)>> = rows
            .par_iter()
            .enumerate()
            .map(|(fold, &row)| {
                let run = || -> Result<(f64, f64)> {
                    let local = row - block.offset;
                    let held = Partition {
                        attribute_id: block.dataset.partition.attribute_id.clone(),
                        domain_id: block.dataset.partition.domain_id.clone(),
                        supports: vec![block.dataset.partition.supports[local].clone()],
                    };
                    let truth = block.dataset.values[local];
                    let fold_view = view.without_observation(v, row)?;
                    let fitted = fit_method(method, &fold_view, l, &fold_config, full.as_ref().map(|f| &f.state))?;
                    let pred = fitted.predict(&held, &block.dataset.rules[local], cv.t_p, train.seed)?;
                    Ok((truth, pred.values[0]))
                };
                run().map_err(|e| Error::Fold {
                    fold: format!("{fold} (L = {l}, support {})", block.dataset.partition.supports[row - block.offset].id),
                    source: Box::new(e),
                })
            })
            .collect();
        let mut truth = Vec::with_capacity(rows.len());
        let mut pred = Vec::with_capacity(rows.len());
        for o in outcomes {
            let (t, p) = o?;
            truth.push(t);
            pred.push(p);
        }
        let err = mape(&truth, &pred)?;
        log::info!("{method}: L = {l}, validation MAPE {err:.6}");
        errors.push((l, err));
    }
    let chosen = argmin_first(&errors).expect("non-empty candidates");
    Ok(CvResult { chosen, errors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mape_examples() {
        assert_eq!(mape(&[1.0, -2.0], &[1.0, -2.0]).unwrap(), 0.0);
        assert!((mape(&[2.0, 4.0], &[1.0, 5.0]).unwrap() - 0.375).abs() < 1e-15);
        assert_eq!(mape(&[1.0, 0.0, 0.0], &[1.0, 1.0, 1.0]), Err(Error::ZeroTruth { indices: vec![1, 2] }));
        assert!(mape(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn ties_go_to_smallest() {
        assert_eq!(argmin_first(&[(1, 0.5), (2, 0.2), (3, 0.2)]), Some(2));
        assert_eq!(argmin_first(&[(4, 0.9)]), Some(4));
        assert_eq!(argmin_first(&[]), None);
    }

    #[test]
    fn parse_choices() {
        assert_eq!("cv".parse::<LatentChoice>().unwrap(), LatentChoice::Auto(CvKeyword::Cv));
        assert_eq!("3".parse::<LatentChoice>().unwrap(), LatentChoice::Fixed(3));
        assert!("0".parse::<LatentChoice>().is_err());
        assert_eq!(serde_json::to_string(&LatentChoice::Fixed(2)).unwrap(), "2");
        assert_eq!(serde_json::from_str::<LatentChoice>("\"cv\"").unwrap(), LatentChoice::Auto(CvKeyword::Cv));
        assert_eq!("amogp-trans".parse::<Method>().unwrap(), Method::AmogpTrans);
        assert!("gp".parse::<Method>().is_err());
    }
}
