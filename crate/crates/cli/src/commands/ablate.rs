//! Train and evaluate every loss/fusion variant, plus the global-to-local
//! pipeline, on one dataset.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use landmark_core::data::store::MANIFEST_FILE;
use landmark_core::data::{load_dataset, Dataset};
use landmark_core::eval::{EvalReport, Stats};
use landmark_core::model::NetworkRole;
use landmark_core::train::Variant;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::eval::evaluate_predictions;
use super::localize::{localize_on, PREDICTIONS_FILE};
use super::train::{train_on, TrainSummary, CHECKPOINT_FILE, SUMMARY_FILE};
use crate::config::{AblateConfig, LocalizeConfig, TrainParams, TrainRunConfig};
use crate::error::Result;
use crate::run::{config_hash, create_dir, file_sha256, read_json, write_json, write_text};

/// Bumped whenever cached checkpoints become incompatible.
const CACHE_VERSION: u32 = 1;

pub const PROPOSED_LABEL: &str = "Proposed global-to-local";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub median: f64,
    pub iqr: f64,
}

impl From<&Stats> for Cell {
    fn from(s: &Stats) -> Self {
        Cell {
            median: s.median,
            iqr: s.iqr,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub variant: Variant,
    pub refined: bool,
    pub per_landmark: Vec<Cell>,
    pub pooled: Cell,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub landmark_names: Vec<String>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, label: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.label == label)
    }

    /// Median (IQR) per landmark and pooled, one row per method.
    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| Method |");
        for n in &self.landmark_names {
            let _ = write!(s, " {n} |");
        }
        s.push_str(" All |\n|---|");
        s.push_str(&"---|".repeat(self.landmark_names.len() + 1));
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "| {} |", r.label);
            for c in r.per_landmark.iter().chain(std::iter::once(&r.pooled)) {
                let _ = write!(s, " {:.2} ({:.2}) |", c.median, c.iqr);
            }
            s.push('\n');
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("method");
        for n in self.landmark_names.iter().map(String::as_str).chain(["all"]) {
            let _ = write!(s, ",{n}_median,{n}_iqr");
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&r.label);
            for c in r.per_landmark.iter().chain(std::iter::once(&r.pooled)) {
                let _ = write!(s, ",{},{}", c.median, c.iqr);
            }
            s.push('\n');
        }
        s
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblateSummary {
    pub dir: PathBuf,
    pub table: AblationTable,
    pub trained: usize,
    pub cached: usize,
}

fn slug(v: Variant) -> String {
    v.label().to_ascii_lowercase().replace('+', "_")
}

/// Train `cfg` unless a completed run with the same inputs exists under
/// `cache_root`. The key covers the resolved configuration, the dataset
/// manifest and the contents of any global checkpoint it depends on.
pub fn cached_train(
    cfg: &TrainRunConfig,
    ds: &Dataset,
    dataset_sha: &str,
    cache_root: &Path,
) -> Result<(TrainSummary, bool)> {
    let mut key = serde_json::to_value(cfg)?;
    key["dataset"] = json!(dataset_sha);
    if let Some(p) = &cfg.global_checkpoint {
        key["global_checkpoint"] = json!(file_sha256(p)?);
    }
    let key = json!({ "cache_version": CACHE_VERSION, "train": key });
    let role = match cfg.role {
        NetworkRole::Global => "global".to_string(),
        NetworkRole::Local => format!("local{}", cfg.landmark.unwrap_or(0)),
    };
    let dir = cache_root.join(format!("{role}-{}-{}", slug(cfg.variant), config_hash(&key)));
    let summary_path = dir.join(SUMMARY_FILE);
    if summary_path.exists() && dir.join(CHECKPOINT_FILE).exists() {
        return Ok((read_json(&summary_path)?, true));
    }
    if dir.exists() {
        std::fs::remove_dir_all(&dir).map_err(|e| crate::error::CliError::io(&dir, e))?;
    }
    create_dir(&dir)?;
    write_json(&dir.join("config.json"), &key)?;
    Ok((train_on(cfg, ds, &dir)?, false))
}

fn evaluate_row(
    label: &str,
    variant: Variant,
    lcfg: &LocalizeConfig,
    ds: &Dataset,
    cfg: &AblateConfig,
    out_dir: &Path,
) -> Result<AblationRow> {
    let preds = localize_on(lcfg, ds)?;
    let report: EvalReport = evaluate_predictions(&preds, ds, &cfg.thresholds)?;
    create_dir(out_dir)?;
    write_json(&out_dir.join(PREDICTIONS_FILE), &preds)?;
    report.write_all(out_dir)?;
    Ok(AblationRow {
        label: label.to_string(),
        variant,
        refined: !lcfg.global_only,
        per_landmark: report.per_landmark.iter().map(Cell::from).collect(),
        pooled: Cell::from(&report.pooled),
    })
}

/// Run the ablation, writing reports under `dir` and checkpoints under
/// `cache_root`.
pub fn run_ablate(cfg: &AblateConfig, dir: &Path, cache_root: &Path) -> Result<AblateSummary> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    let dataset_sha = file_sha256(&cfg.dataset.join(MANIFEST_FILE))?;
    let (mut trained, mut cached) = (0, 0);
    let mut count = |was_cached: bool| {
        if was_cached {
            cached += 1
        } else {
            trained += 1
        }
    };
    let mut rows = Vec::new();
    let mut proposed_global = None;
    for &variant in &cfg.variants {
        let tcfg = TrainRunConfig {
            dataset: cfg.dataset.clone(),
            role: NetworkRole::Global,
            variant,
            training: cfg.global.clone(),
            ..TrainRunConfig::default()
        };
        let (summary, was_cached) = cached_train(&tcfg, &ds, &dataset_sha, cache_root)?;
        count(was_cached);
        let lcfg = LocalizeConfig {
            dataset: cfg.dataset.clone(),
            split: cfg.split,
            global_checkpoint: summary.checkpoint.clone(),
            global_only: true,
            ..LocalizeConfig::default()
        };
        rows.push(evaluate_row(variant.label(), variant, &lcfg, &ds, cfg, &dir.join(slug(variant)))?);
        if variant == Variant::RLogC {
            proposed_global = Some(summary.checkpoint);
        }
    }
    if cfg.refine {
        let global = proposed_global.expect("validated");
        let mut locals = Vec::new();
        for k in 0..ds.landmark_names().len() {
            let tcfg = TrainRunConfig {
                dataset: cfg.dataset.clone(),
                role: NetworkRole::Local,
                landmark: Some(k),
                variant: Variant::RLogC,
                training: local_params(&cfg.local, k),
                global_checkpoint: Some(global.clone()),
                ..TrainRunConfig::default()
            };
            let (summary, was_cached) = cached_train(&tcfg, &ds, &dataset_sha, cache_root)?;
            count(was_cached);
            locals.push(Some(summary.checkpoint));
        }
        let lcfg = LocalizeConfig {
            dataset: cfg.dataset.clone(),
            split: cfg.split,
            global_checkpoint: global,
            local_checkpoints: locals,
            ..LocalizeConfig::default()
        };
        rows.push(evaluate_row(PROPOSED_LABEL, Variant::RLogC, &lcfg, &ds, cfg, &dir.join("proposed"))?);
    }
    let table = AblationTable {
        landmark_names: ds.landmark_names(),
        rows,
    };
    write_json(&dir.join("table.json"), &table)?;
    write_text(&dir.join("table.md"), &table.to_markdown())?;
    write_text(&dir.join("table.csv"), &table.to_csv())?;
    Ok(AblateSummary {
        dir: dir.to_path_buf(),
        table,
        trained,
        cached,
    })
}

/// Local networks get distinct seeds so they do not share crop sequences.
fn local_params(p: &TrainParams, k: usize) -> TrainParams {
    let mut p = p.clone();
    p.seed = p.seed.wrapping_add(k as u64 + 1);
    p
}
