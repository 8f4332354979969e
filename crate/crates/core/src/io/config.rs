use std::path::Path;

use serde::{Deserialize, Serialize};

use super::dataset::Catalogue;
use crate::error::{Error, Result};
use crate::evaluation::{CvConfig, ExperimentSpec, LatentChoice, Method, Target};
use crate::inference::TrainConfig;

fn default_method() -> Method {
    Method::AmogpTrans
}

fn default_t_p() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default = "default_method")]
    pub method: Method,
    #[serde(default)]
    pub num_latents: LatentChoice,
    /// Starting kernel scales, one per latent; overrides the default spread.
    #[serde(default)]
    pub initial_betas: Option<Vec<f64>>,
    /// Starting noise variance for every dataset, in normalized units.
    #[serde(default)]
    pub initial_noise: Option<f64>,
    /// Required by every method except `amogp-trans`.
    #[serde(default)]
    pub target: Option<Target>,
    /// Dataset ids never used for training.
    #[serde(default)]
    pub exclude: Vec<String>,
    #[serde(default)]
    pub cv: CvConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            method: default_method(),
            num_latents: LatentChoice::default(),
            initial_betas: None,
            initial_noise: None,
            target: None,
            exclude: Vec::new(),
            cv: CvConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionSection {
    #[serde(default = "default_t_p")]
    pub t_p: usize,
    /// Dataset id whose partition `refine` predicts onto.
    #[serde(default)]
    pub target_partition: Option<String>,
    /// Also export the fine-grid posterior of the target attribute.
    #[serde(default)]
    pub grid: bool,
}

impl Default for PredictionSection {
    fn default() -> Self {
        PredictionSection { t_p: default_t_p(), target_partition: None, grid: false }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub training: TrainConfig,
    #[serde(default)]
    pub prediction: PredictionSection,
    #[serde(default)]
    pub experiment: Option<ExperimentSpec>,
}

impl ConfigFile {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Canonical serialization, used for hashing.
    pub fn canonical(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    /// Checks value ranges and that every referenced id exists in `catalogue`.
    pub fn validate(&self, catalogue: &Catalogue) -> Result<()> {
        self.training.validate()?;
        if self.prediction.t_p == 0 {
            return Err(Error::InvalidConfig("prediction.t_p must be at least 1".into()));
        }
        if let Some(betas) = &self.model.initial_betas {
            if betas.is_empty() || betas.iter().any(|b| !(b.is_finite() && *b > 0.0)) {
                return Err(Error::InvalidConfig("initial_betas must be positive and finite".into()));
            }
            let fixed = match (self.model.method, self.model.num_latents) {
                (Method::Agp, _) => Some(1),
                (_, LatentChoice::Fixed(l)) => Some(l),
                _ => None,
            };
            if let Some(l) = fixed {
                if l != betas.len() {
                    return Err(Error::InvalidConfig(format!("{} initial_betas for {l} latents", betas.len())));
                }
            }
        }
        if let Some(n) = self.model.initial_noise {
            if !(n.is_finite() && n > 0.0) {
                return Err(Error::InvalidConfig(format!("initial_noise must be positive, got {n}")));
            }
        }
        if let Some(t) = &self.model.target {
            check_target(t, catalogue)?;
        } else if self.model.method != Method::AmogpTrans {
            return Err(Error::InvalidConfig(format!("method {} needs model.target", self.model.method)));
        }
        for id in &self.model.exclude {
            catalogue.dataset(id)?;
        }
        if let Some(id) = &self.prediction.target_partition {
            catalogue.dataset(id)?;
        }
        if let Some(e) = &self.experiment {
            check_target(&e.target, catalogue)?;
            catalogue.dataset(&e.coarse)?;
            catalogue.dataset(&e.fine)?;
            for id in &e.exclude {
                catalogue.dataset(id)?;
            }
        }
        Ok(())
    }
}

fn check_target(t: &Target, catalogue: &Catalogue) -> Result<()> {
    if !catalogue.domains.iter().any(|d| d.id == t.domain) {
        return Err(Error::InvalidConfig(format!("unknown target domain {}", t.domain)));
    }
    if !catalogue.attributes.contains(&t.attribute) {
        return Err(Error::InvalidConfig(format!("unknown target attribute {}", t.attribute)));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_and_unknown_fields() {
        let c = ConfigFile::from_json("{}").unwrap();
        assert_eq!(c.prediction.t_p, 100);
        assert_eq!(c.model.method, Method::AmogpTrans);
        assert_eq!(c.model.num_latents, LatentChoice::default());
        assert_eq!(c.training, TrainConfig::default());
        assert!(ConfigFile::from_json(r#"{"training": {"lr": 0.1}}"#).is_err());
        let c = ConfigFile::from_json(r#"{"model": {"num_latents": 2, "method": "agp"}, "training": {"max_iters": 10}}"#).unwrap();
        assert_eq!(c.model.num_latents, LatentChoice::Fixed(2));
        assert_eq!(c.training.max_iters, 10);
        let back = ConfigFile::from_json(&c.canonical().unwrap()).unwrap();
        assert_eq!(back, c);
    }
}
