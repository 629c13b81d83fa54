use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use landmark_core::data::{load_dataset, Dataset};
use landmark_core::eval::{evaluate, EvalCase, EvalReport, SdrPoint, SdrSpec};
use serde::Serialize;

use super::localize::PredictionsFile;
use crate::config::EvalConfig;
use crate::error::{CliError, Result};
use crate::run::read_json;

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub dir: PathBuf,
    pub images: usize,
    pub pooled_median_mm: f64,
    pub pooled_iqr_mm: f64,
    pub pooled_sdr: Vec<SdrPoint>,
}

/// Pair predictions with the references of the same split. The two image
/// sets must be identical.
pub fn evaluate_predictions(preds: &PredictionsFile, ds: &Dataset, spec: &SdrSpec) -> Result<EvalReport> {
    let refs: BTreeMap<&str, _> = ds.split(preds.split).map(|i| (i.id.as_str(), i)).collect();
    let pred_ids: BTreeSet<&str> = preds.images.iter().map(|i| i.image_id.as_str()).collect();
    let ref_ids: BTreeSet<&str> = refs.keys().copied().collect();
    if pred_ids.len() != preds.images.len() {
        return Err(CliError::Runtime("predictions contain duplicate image ids".into()));
    }
    if pred_ids != ref_ids {
        let only_pred: Vec<_> = pred_ids.difference(&ref_ids).take(3).collect();
        let only_ref: Vec<_> = ref_ids.difference(&pred_ids).take(3).collect();
        return Err(CliError::Runtime(format!(
            "image sets differ for split {}: predicted only {only_pred:?}, reference only {only_ref:?}",
            preds.split
        )));
    }
    let cases = preds
        .images
        .iter()
        .map(|p| {
            let item = refs[p.image_id.as_str()];
            if p.spacing != item.image.spacing() {
                return Err(CliError::Runtime(format!(
                    "{}: prediction spacing {:?} differs from reference {:?}",
                    p.image_id,
                    p.spacing,
                    item.image.spacing()
                )));
            }
            Ok(EvalCase {
                id: p.image_id.clone(),
                pred: p.to_landmark_set()?,
                truth: item.landmarks.clone(),
                spacing: item.image.spacing().to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate(&cases, spec)?)
}

pub fn summarize(report: &EvalReport, dir: &Path, images: usize) -> EvalSummary {
    EvalSummary {
        dir: dir.to_path_buf(),
        images,
        pooled_median_mm: report.pooled.median,
        pooled_iqr_mm: report.pooled.iqr,
        pooled_sdr: report.pooled.sdr.clone(),
    }
}

pub fn run_eval(cfg: &EvalConfig, dir: &Path) -> Result<EvalSummary> {
    cfg.validate()?;
    let preds: PredictionsFile = read_json(&cfg.predictions)?;
    let ds = load_dataset(&cfg.references)?;
    let report = evaluate_predictions(&preds, &ds, &cfg.thresholds)?;
    report.write_all(dir)?;
    Ok(summarize(&report, dir, preds.images.len()))
}
