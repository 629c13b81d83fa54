//! `synth` and `ingest`: produce dataset directories.

use std::path::{Path, PathBuf};

use landmark_core::data::isbi::load_observer_annotations;
use landmark_core::data::store::MANIFEST_FILE;
use landmark_core::data::{
    hist_equalize, load_isbi, resample, resample_landmarks, save_dataset, synth_generate, Dataset,
    IsbiOptions, Split,
};
use landmark_core::eval::{observer_variability, SdrSpec};
use landmark_core::LandmarkSet;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{IngestConfig, SynthConfig};
use crate::error::Result;
use crate::run::{file_sha256, write_json};

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub dir: PathBuf,
    pub manifest_sha256: String,
    pub items: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

fn finish(ds: &Dataset, dir: &Path, source: Value) -> Result<DatasetSummary> {
    save_dataset(ds, dir, Some(source))?;
    Ok(DatasetSummary {
        dir: dir.to_path_buf(),
        manifest_sha256: file_sha256(&dir.join(MANIFEST_FILE))?,
        items: ds.items.len(),
        train: ds.count(Split::Train),
        validation: ds.count(Split::Validation),
        test: ds.count(Split::Test),
    })
}

pub fn run_synth(cfg: &SynthConfig, resolved: &Value, dir: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    let mut ds = synth_generate(&cfg.spec, cfg.count, cfg.seed)?;
    cfg.split.apply(&mut ds, cfg.seed)?;
    finish(&ds, dir, json!({ "synth": resolved }))
}

/// File written next to the manifest by `ingest`.
pub const OBSERVER_REPORT: &str = "observer_variability.json";

pub fn run_ingest(cfg: &IngestConfig, resolved: &Value, dir: &Path) -> Result<DatasetSummary> {
    cfg.validate()?;
    let opts = IsbiOptions {
        expected_extents: cfg.expected_extents,
        spacing_mm: cfg.spacing_mm,
        num_landmarks: cfg.num_landmarks,
    };
    let annot = [cfg.annotation_dirs[0].as_path(), cfg.annotation_dirs[1].as_path()];
    let mut ds = load_isbi(&cfg.image_dir, annot, &opts)?;
    for item in &mut ds.items {
        if cfg.hist_equalize {
            item.image = hist_equalize(&item.image);
        }
        if let Some(s) = cfg.resample_mm {
            let from = item.image.spacing().to_vec();
            let to = vec![s; from.len()];
            item.image = resample(&item.image, &to)?;
            item.landmarks = resample_landmarks(&item.landmarks, &from, &to);
        }
    }
    cfg.split.apply(&mut ds, cfg.seed)?;
    let summary = finish(&ds, dir, json!({ "ingest": resolved }))?;

    let names = ds.landmark_names();
    let raw = load_observer_annotations(&cfg.image_dir, annot, cfg.num_landmarks)?;
    let (a, b): (Vec<LandmarkSet>, Vec<LandmarkSet>) = raw
        .into_iter()
        .map(|(_, [a, b])| {
            Ok((
                LandmarkSet::all_present(names.clone(), a)?,
                LandmarkSet::all_present(names.clone(), b)?,
            ))
        })
        .collect::<landmark_core::Result<Vec<_>>>()?
        .into_iter()
        .unzip();
    let spacing = [cfg.spacing_mm, cfg.spacing_mm];
    let report = observer_variability(&a, &b, &spacing, &SdrSpec::challenge())?;
    write_json(&dir.join(OBSERVER_REPORT), &report)?;
    Ok(summary)
}
