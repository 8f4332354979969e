//! Comparison methods run through the same engine: a single-output
//! aggregated GP and a multi-output GP on support centroids.

use serde::{Deserialize, Serialize};

use crate::data::TrainingData;
use crate::error::{Error, Result};
use crate::geometry::{centroid, Domain, Partition, Support};
use crate::inference::{fit, TrainConfig, TrainTrace};
use crate::model::ModelState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineKind {
    Agp,
    Slfm,
}

/// Single-output aggregated GP: one dataset, one latent process.
pub fn fit_agp(data: &TrainingData, config: &TrainConfig) -> Result<(ModelState, TrainTrace)> {
    if data.num_datasets() != 1 {
        return Err(Error::Precondition(format!(
            "the single-output baseline takes exactly one dataset, got {}",
            data.num_datasets()
        )));
    }
    let init = ModelState::init(data, 1, config.seed)?;
    fit(data, config, &init)
}

/// Multi-output GP with every support collapsed to its centroid.
///
/// Returns the point-support training data alongside the fit; predictions
/// must be made against it with [`centroid_partition`] targets.
pub fn fit_slfm(data: &TrainingData, num_latents: usize, config: &TrainConfig) -> Result<(ModelState, TrainTrace, TrainingData)> {
    if data.domains.len() != 1 {
        return Err(Error::Precondition(format!(
            "the centroid baseline takes a single domain, got {}",
            data.domains.len()
        )));
    }
    let points = data.to_centroids()?;
    let init = ModelState::init(&points, num_latents, config.seed)?;
    let (state, trace) = fit(&points, config, &init)?;
    Ok((state, trace, points))
}

/// `partition` with each support replaced by a point at its centroid.
pub fn centroid_partition(partition: &Partition, domain: &Domain) -> Result<Partition> {
    let supports = partition
        .supports
        .iter()
        .map(|s| Ok(Support::point(s.id.clone(), s.domain_id.clone(), centroid(s, &domain.grid)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(Partition { attribute_id: partition.attribute_id.clone(), domain_id: partition.domain_id.clone(), supports })
}
