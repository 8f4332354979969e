use super::config::ConfigFile;
use super::dataset::Catalogue;
use super::model::ModelFile;
use super::sha256_hex;
use crate::data::TrainingData;
use crate::error::{Error, Result};
use crate::evaluation::{cv_select_latents, fit_method, CvResult, Fitted, LatentChoice, Method};
use crate::kernels::{KernelSet, SEKernel};
use crate::model::ModelState;

/// Result of the configured fit, with the data view it was trained on.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub fitted: Fitted,
    /// Training view before any centroid conversion.
    pub view: TrainingData,
    pub cv_errors: Vec<(usize, f64)>,
}

/// Every dataset in the catalogue except the excluded ones.
pub fn training_data(catalogue: &Catalogue, config: &ConfigFile) -> Result<TrainingData> {
    let datasets = catalogue.datasets.iter().filter(|d| !config.model.exclude.contains(&d.id)).cloned().collect();
    TrainingData::new(catalogue.attributes.clone(), catalogue.domains.clone(), datasets)
}

/// The data `config.model.method` may see.
pub fn method_view(catalogue: &Catalogue, config: &ConfigFile) -> Result<TrainingData> {
    let data = training_data(catalogue, config)?;
    match (&config.model.target, config.model.method) {
        (Some(t), m) => m.training_view(&data, t),
        (None, Method::AmogpTrans) => Ok(data),
        (None, m) => Err(Error::InvalidConfig(format!("method {m} needs model.target"))),
    }
}

/// Leave-one-out selection of the latent count on the configured target.
pub fn select_latents(view: &TrainingData, config: &ConfigFile) -> Result<CvResult> {
    let target = config
        .model
        .target
        .as_ref()
        .ok_or_else(|| Error::InvalidConfig("choosing latents by cross-validation needs model.target".into()))?;
    cv_select_latents(config.model.method, view, target, &config.training, &config.model.cv)
}

/// Validates `config` against `catalogue`, picks the latent count and trains.
pub fn fit_configured(catalogue: &Catalogue, config: &ConfigFile) -> Result<FitOutcome> {
    config.validate(catalogue)?;
    let view = method_view(catalogue, config)?;
    let (latents, cv_errors) = match config.model.num_latents {
        LatentChoice::Fixed(l) => (l, Vec::new()),
        LatentChoice::Auto(_) => {
            let cv = select_latents(&view, config)?;
            (cv.chosen, cv.errors)
        }
    };
    let l = if config.model.method == Method::Agp { 1 } else { latents };
    let warm = if config.model.initial_betas.is_some() || config.model.initial_noise.is_some() {
        let mut init = ModelState::init(&view, l, config.training.seed)?;
        if let Some(betas) = &config.model.initial_betas {
            if betas.len() != l {
                return Err(Error::InvalidConfig(format!("{} initial_betas for {l} latents", betas.len())));
            }
            init.kernels = KernelSet::new(betas.iter().map(|&b| SEKernel::new(b)).collect())?;
        }
        if let Some(n) = config.model.initial_noise {
            init.noise.log_sigma2.iter_mut().for_each(|v| v.fill(n.ln()));
        }
        Some(init)
    } else {
        None
    };
    let fitted = fit_method(config.model.method, &view, latents, &config.training, warm.as_ref())?;
    Ok(FitOutcome { fitted, view, cv_errors })
}

impl FitOutcome {
    pub fn model_file(&self, config: &ConfigFile) -> Result<ModelFile> {
        let config_hash = sha256_hex(config.canonical()?.as_bytes());
        ModelFile::new(&self.fitted, &self.view, config.training.seed, config_hash, self.cv_errors.clone())
    }
}
