use std::path::{Path, PathBuf};

use landmark_core::data::{load_dataset, Dataset, Split};
use landmark_core::localize::{pipeline_localize, ImagePrediction, PipelineModel};
use landmark_core::model::{checkpoint, NetworkRole};
use landmark_core::train::Variant;
use serde::{Deserialize, Serialize};

use crate::config::LocalizeConfig;
use crate::error::{CliError, Result};
use crate::run::write_json;

pub const PREDICTIONS_FILE: &str = "predictions.json";
pub const PREDICTIONS_VERSION: u32 = 1;

/// The `localize` output document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionsFile {
    pub version: u32,
    pub dataset: PathBuf,
    pub split: Split,
    pub global_only: bool,
    pub landmark_names: Vec<String>,
    pub images: Vec<ImagePrediction>,
}

#[derive(Debug, Clone, Serialize)]
pub struct LocalizeSummary {
    pub predictions: PathBuf,
    pub images: usize,
    pub mean_ms: f64,
    pub max_ms: f64,
    /// Refinements that kept the global estimate for lack of confidence.
    pub fallbacks: usize,
}

/// Load the global network and, unless `global_only`, the local networks.
pub fn build_pipeline(cfg: &LocalizeConfig, dataset_names: &[String]) -> Result<PipelineModel> {
    let (global, meta) = checkpoint::load(&cfg.global_checkpoint)?;
    if global.config().role != NetworkRole::Global {
        return Err(CliError::Config(format!(
            "{} is not a global network",
            cfg.global_checkpoint.display()
        )));
    }
    let k = global.config().num_landmarks;
    if k != dataset_names.len() {
        return Err(CliError::Config(format!(
            "global network predicts {k} landmarks, dataset has {}",
            dataset_names.len()
        )));
    }
    if meta.landmark_names.len() == k && meta.landmark_names != dataset_names {
        return Err(CliError::Config(format!(
            "checkpoint landmarks {:?} differ from dataset landmarks {dataset_names:?}",
            meta.landmark_names
        )));
    }
    let fusion = cfg
        .global_fusion
        .or(meta.variant.map(Variant::fusion))
        .unwrap_or_default();
    let mut pm = PipelineModel::new(global, dataset_names.to_vec(), fusion)?;
    if cfg.global_only {
        return Ok(pm);
    }
    if cfg.local_checkpoints.len() > k {
        return Err(CliError::Config(format!(
            "{} local checkpoints for {k} landmarks",
            cfg.local_checkpoints.len()
        )));
    }
    let mut trained_extents = None;
    let mut trained_fusion = None;
    for (i, path) in cfg.local_checkpoints.iter().enumerate() {
        let Some(path) = path else { continue };
        let (net, meta) = checkpoint::load(path)?;
        if trained_extents.is_none() && !meta.crop_extents.is_empty() {
            trained_extents = Some(meta.crop_extents.clone());
        }
        trained_fusion = trained_fusion.or(meta.variant.map(Variant::fusion));
        pm.set_local(i, net)?;
    }
    if let Some(e) = cfg.local_extents.clone().or(trained_extents) {
        if e.len() != pm.global.config().dims {
            return Err(CliError::Config(format!("local_extents needs {} values", pm.global.config().dims)));
        }
        pm.local_extents = e;
    }
    pm.local_fusion = cfg.local_fusion.or(trained_fusion).unwrap_or_default();
    Ok(pm)
}

/// Localize every image of the configured split.
pub fn localize_on(cfg: &LocalizeConfig, ds: &Dataset) -> Result<PredictionsFile> {
    let names = ds.landmark_names();
    let pm = build_pipeline(cfg, &names)?;
    let images = ds
        .split(cfg.split)
        .map(|item| {
            let out = pipeline_localize(&pm, &item.image)?;
            Ok(ImagePrediction::from_output(&item.id, item.image.spacing(), &out)?)
        })
        .collect::<Result<Vec<_>>>()?;
    if images.is_empty() {
        return Err(CliError::Runtime(format!("the {} split is empty", cfg.split)));
    }
    Ok(PredictionsFile {
        version: PREDICTIONS_VERSION,
        dataset: cfg.dataset.clone(),
        split: cfg.split,
        global_only: cfg.global_only,
        landmark_names: names,
        images,
    })
}

pub fn summarize(preds: &PredictionsFile, path: &Path) -> LocalizeSummary {
    let times: Vec<f64> = preds.images.iter().map(|i| i.timings.total_ms).collect();
    LocalizeSummary {
        predictions: path.to_path_buf(),
        images: times.len(),
        mean_ms: times.iter().sum::<f64>() / times.len().max(1) as f64,
        max_ms: times.iter().copied().fold(0.0, f64::max),
        fallbacks: preds
            .images
            .iter()
            .flat_map(|i| &i.landmarks)
            .filter(|l| l.fallback)
            .count(),
    }
}

pub fn run_localize(cfg: &LocalizeConfig, dir: &Path) -> Result<LocalizeSummary> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let preds = localize_on(cfg, &ds)?;
    let path = dir.join(PREDICTIONS_FILE);
    write_json(&path, &preds)?;
    Ok(summarize(&preds, &path))
}
