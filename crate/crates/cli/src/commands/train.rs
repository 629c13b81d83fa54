use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use landmark_core::data::{load_dataset, Dataset, Split};
use landmark_core::localize::global_estimates;
use landmark_core::model::{checkpoint, Network, NetworkRole};
use landmark_core::train::{
    prepare_samples, train_loop, GlobalValidator, LocalValidator, TrainOutputs, Validator, Variant,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainRunConfig;
use crate::error::{CliError, Result};
use crate::run::{write_json, write_text};

pub const CHECKPOINT_FILE: &str = "best.ckpt";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const LOSS_FILE: &str = "loss.csv";
pub const SUMMARY_FILE: &str = "summary.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub role: NetworkRole,
    pub variant: Variant,
    pub landmark: Option<usize>,
    pub landmark_names: Vec<String>,
    pub iterations: usize,
    pub best_iteration: usize,
    /// Median validation error in voxels of the selected weights.
    pub best_median_vox: f64,
    pub num_parameters: usize,
    pub elapsed_s: f64,
}

pub fn run_train(cfg: &TrainRunConfig, dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let ds = load_dataset(&cfg.dataset)?;
    train_on(cfg, &ds, dir)
}

/// Train with an already loaded dataset. `summary.json` is written last, so
/// its presence marks a completed run.
pub fn train_on(cfg: &TrainRunConfig, ds: &Dataset, dir: &Path) -> Result<TrainSummary> {
    cfg.validate()?;
    let start = Instant::now();
    let all_names = ds.landmark_names();
    let dims = ds
        .items
        .first()
        .ok_or_else(|| CliError::Runtime("dataset is empty".into()))?
        .image
        .dims();
    let names = match cfg.landmark {
        Some(k) if k >= all_names.len() => {
            return Err(CliError::Config(format!(
                "landmark {k} out of range; the dataset has {}",
                all_names.len()
            )))
        }
        Some(k) => vec![all_names[k].clone()],
        None => all_names.clone(),
    };
    let train = prepare_samples(ds.split(Split::Train), cfg.landmark);
    let val = prepare_samples(ds.split(Split::Validation), cfg.landmark);
    if train.is_empty() || val.is_empty() {
        return Err(CliError::Runtime(format!(
            "need training and validation items with the landmark present, got {} and {}",
            train.len(),
            val.len()
        )));
    }
    let net_cfg = cfg
        .training
        .architecture
        .build(cfg.role, dims, names.len(), cfg.variant)?;
    let crop = cfg.training.crop(cfg.role, dims)?;
    let tc = cfg.training.train_config(cfg.variant, crop)?;
    let mut net = Network::build(net_cfg, &mut ChaCha8Rng::seed_from_u64(cfg.training.seed))?;
    let fusion = cfg.variant.fusion();

    let mut validator: Box<dyn Validator> = match cfg.role {
        NetworkRole::Global => Box::new(GlobalValidator { samples: val, fusion }),
        NetworkRole::Local => {
            let starts = match &cfg.global_checkpoint {
                Some(p) => {
                    let k = cfg.landmark.expect("validated");
                    let (global, meta) = checkpoint::load(p)?;
                    if global.config().num_landmarks != all_names.len() {
                        return Err(CliError::Config(format!(
                            "global checkpoint predicts {} landmarks, dataset has {}",
                            global.config().num_landmarks,
                            all_names.len()
                        )));
                    }
                    let gf = meta.variant.map(Variant::fusion).unwrap_or_default();
                    val.iter()
                        .map(|s| Ok(global_estimates(&global, &s.image, gf)?.swap_remove(k)))
                        .collect::<Result<Vec<_>>>()?
                }
                None => LocalValidator::perturbed_starts(&val, cfg.start_offset, cfg.training.seed),
            };
            Box::new(LocalValidator {
                samples: val,
                starts,
                extents: tc.crop.extents.clone(),
                fusion,
            })
        }
    };
    let outputs = TrainOutputs {
        checkpoint: Some(dir.join(CHECKPOINT_FILE)),
        log: Some(dir.join(LOG_FILE)),
        landmark_names: names.clone(),
    };
    let out = train_loop(&mut net, &train, validator.as_mut(), &tc, &outputs)?;

    let mut csv = String::from("iteration,loss\n");
    for (i, l) in out.log.step_losses.iter().enumerate() {
        let _ = writeln!(csv, "{},{l}", i + 1);
    }
    write_text(&dir.join(LOSS_FILE), &csv)?;
    let summary = TrainSummary {
        checkpoint: dir.join(CHECKPOINT_FILE),
        log: dir.join(LOG_FILE),
        role: cfg.role,
        variant: cfg.variant,
        landmark: cfg.landmark,
        landmark_names: names,
        iterations: tc.iterations,
        best_iteration: out.best_iteration,
        best_median_vox: out.best_metric,
        num_parameters: out.best.num_parameters(),
        elapsed_s: start.elapsed().as_secs_f64(),
    };
    write_json(&dir.join(SUMMARY_FILE), &summary)?;
    Ok(summary)
}
