use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{cv_select_latents, fit_method, mape, CvConfig, LatentChoice, Method, Target};
use crate::data::{AggregatedDataset, TrainingData};
use crate::error::{Error, Result};
use crate::geometry::Domain;
use crate::inference::TrainConfig;
use crate::model::ModelState;

fn default_t_p() -> usize {
    100
}

/// One refinement experiment: train on a coarse target dataset (plus whatever
/// the method may see) and score predictions on a fine one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub target: Target,
    /// Dataset id of the coarse target observations used for training.
    pub coarse: String,
    /// Dataset id of the fine target values used only for scoring.
    pub fine: String,
    pub method: Method,
    #[serde(default)]
    pub latents: LatentChoice,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub cv: CvConfig,
    #[serde(default = "default_t_p")]
    pub t_p: usize,
    /// Dataset ids left out of training.
    #[serde(default)]
    pub exclude: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainCoregionalization {
    pub domain: String,
    pub attributes: Vec<String>,
    /// `|W W^T|` of the variational means, elementwise absolute.
    pub matrix: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub seed: u64,
    pub latents: Option<usize>,
    pub cv_errors: Vec<(usize, f64)>,
    pub mape: Option<f64>,
    pub error: Option<String>,
    pub predictions: Vec<f64>,
    pub variances: Vec<f64>,
    pub clamped_variances: usize,
    pub elbo_margin: Option<f64>,
    pub coregionalization: Vec<DomainCoregionalization>,
    #[serde(skip)]
    pub train_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub method: Method,
    pub target: Target,
    pub coarse: String,
    pub fine: String,
    pub support_ids: Vec<String>,
    pub truth: Vec<f64>,
    pub runs: Vec<RunResult>,
    pub mape_mean: Option<f64>,
    /// Standard error of the MAPE across seeds.
    pub mape_se: Option<f64>,
    pub completed: usize,
    pub failed: usize,
}

impl Report {
    /// Fixed-width summary, one line per seed.
    pub fn table(&self) -> String {
        let mut out = format!("{:>12}  {:>7}  {:>10}  {:>9}\n", "seed", "L", "MAPE", "train[s]");
        for r in &self.runs {
            let l = r.latents.map(|l| l.to_string()).unwrap_or_else(|| "-".into());
            let m = match (&r.mape, &r.error) {
                (Some(m), _) => format!("{m:.4}"),
                (None, Some(_)) => "failed".into(),
                _ => "-".into(),
            };
            out.push_str(&format!("{:>12}  {:>7}  {:>10}  {:>9.2}\n", r.seed, l, m, r.train_secs));
        }
        match (self.mape_mean, self.mape_se) {
            (Some(m), Some(se)) => out.push_str(&format!("{}: MAPE {m:.4} +- {se:.4} (seed-wise SE, n = {})\n", self.method, self.completed)),
            (Some(m), None) => out.push_str(&format!("{}: MAPE {m:.4} (n = {})\n", self.method, self.completed)),
            _ => out.push_str(&format!("{}: no completed runs\n", self.method)),
        }
        out
    }
}

pub fn coregionalization(state: &ModelState, data: &TrainingData) -> Vec<DomainCoregionalization> {
    data.domains
        .iter()
        .enumerate()
        .map(|(v, dd)| {
            let w = &state.variational.w_bar[v];
            let m = w * w.transpose();
            DomainCoregionalization {
                domain: dd.domain.id.clone(),
                attributes: dd.blocks.iter().map(|b| data.attributes[b.attribute].clone()).collect(),
                matrix: (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)].abs()).collect()).collect(),
            }
        })
        .collect()
}

fn mean_se(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (Some(mean), None);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (Some(mean), Some((var / n).sqrt()))
}

/// Trains per seed and scores the fine target; per-seed failures are recorded and the run continues.
pub fn run_experiment(spec: &ExperimentSpec, attributes: &[String], domains: &[Domain], datasets: &[AggregatedDataset]) -> Result<Report> {
    let find = |id: &str| {
        datasets
            .iter()
            .find(|d| d.id == id)
            .ok_or_else(|| Error::InvalidConfig(format!("dataset {id} not found")))
    };
    let coarse = find(&spec.coarse)?;
    let fine = find(&spec.fine)?;
    for d in [coarse, fine] {
        if d.domain_id() != spec.target.domain || d.attribute_id() != spec.target.attribute {
            return Err(Error::InvalidConfig(format!(
                "dataset {} observes {}/{}, not the target {}/{}",
                d.id,
                d.domain_id(),
                d.attribute_id(),
                spec.target.domain,
                spec.target.attribute
            )));
        }
    }
    let rule = fine.rules.first().cloned().ok_or_else(|| Error::EmptyPartition { partition: fine.id.clone() })?;
    if fine.rules.iter().any(|r| *r != rule) {
        return Err(Error::InvalidConfig(format!("dataset {} mixes aggregation rules", fine.id)));
    }
    let mut report = Report {
        method: spec.method,
        target: spec.target.clone(),
        coarse: spec.coarse.clone(),
        fine: spec.fine.clone(),
        support_ids: fine.partition.supports.iter().map(|s| s.id.clone()).collect(),
        truth: fine.values.clone(),
        runs: Vec::new(),
        mape_mean: None,
        mape_se: None,
        completed: 0,
        failed: 0,
    };
    if spec.seeds.is_empty() {
        return Ok(report);
    }

    let training: Vec<AggregatedDataset> = datasets
        .iter()
        .filter(|d| d.id != spec.fine && !spec.exclude.contains(&d.id))
        .filter(|d| d.id == spec.coarse || d.domain_id() != spec.target.domain || d.attribute_id() != spec.target.attribute)
        .cloned()
        .collect();
    let data = TrainingData::new(attributes.to_vec(), domains.to_vec(), training)?;
    let view = spec.method.training_view(&data, &spec.target)?;

    let runs: Vec<RunResult> = spec
        .seeds
        .par_iter()
        .map(|&seed| {
            let started = Instant::now();
            let mut run = RunResult {
                seed,
                latents: None,
                cv_errors: Vec::new(),
                mape: None,
                error: None,
                predictions: Vec::new(),
                variances: Vec::new(),
                clamped_variances: 0,
                elbo_margin: None,
                coregionalization: Vec::new(),
                train_secs: 0.0,
            };
            let train = TrainConfig { seed, ..spec.train.clone() };
            let outcome = (|| -> Result<()> {
                let latents = match spec.latents {
                    LatentChoice::Fixed(n) => n,
                    LatentChoice::Auto(_) => {
                        let cv = cv_select_latents(spec.method, &view, &spec.target, &train, &spec.cv)?;
                        run.cv_errors = cv.errors;
                        cv.chosen
                    }
                };
                let fitted = fit_method(spec.method, &view, latents, &train, None)?;
                run.latents = Some(fitted.state.num_latents());
                run.train_secs = started.elapsed().as_secs_f64();
                run.elbo_margin = fitted.trace.margin();
                run.coregionalization = coregionalization(&fitted.state, &fitted.data);
                let pred = fitted.predict(&fine.partition, &rule, spec.t_p, seed)?;
                run.mape = Some(mape(&fine.values, &pred.values)?);
                run.predictions = pred.values;
                run.variances = pred.variances;
                run.clamped_variances = pred.clamped;
                Ok(())
            })();
            if let Err(e) = outcome {
                log::warn!("seed {seed}: {e}");
                run.error = Some(format!("{}: {e}", e.kind()));
            }
            if run.train_secs == 0.0 {
                run.train_secs = started.elapsed().as_secs_f64();
            }
            run
        })
        .collect();

    let scores: Vec<f64> = runs.iter().filter_map(|r| r.mape).collect();
    let (mean, se) = mean_se(&scores);
    report.mape_mean = mean;
    report.mape_se = se;
    report.completed = scores.len();
    report.failed = runs.len() - scores.len();
    report.runs = runs;
    Ok(report)
}
