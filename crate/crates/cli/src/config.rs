//! Command configurations.
//!
//! Each command reads an optional JSON file, overrides individual keys from
//! command-line flags and fills everything else with defaults. Unknown keys
//! are rejected with the path of the offending key.

use std::path::{Path, PathBuf};

use landmark_core::data::isbi::ISBI_EXTENTS;
use landmark_core::data::{Dataset, Split, SynthSpec};
use landmark_core::eval::SdrSpec;
use landmark_core::localize::FusionMode;
use landmark_core::model::{NetworkConfig, NetworkRole};
use landmark_core::sampling::{CropConstraint, CropSpec};
use landmark_core::train::{TrainConfig, Variant};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

/// Parse `file` (if any), apply `overrides` at dotted key paths, and
/// deserialize. Also returns the fully resolved configuration as JSON.
pub fn resolve<T: DeserializeOwned + Serialize>(
    file: Option<&Path>,
    overrides: &[(&str, Value)],
) -> Result<(T, Value)> {
    let mut root = match file {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => Value::Object(Map::new()),
    };
    if !root.is_object() {
        return Err(CliError::Config("configuration must be a JSON object".into()));
    }
    for (path, v) in overrides {
        set_path(&mut root, path, v.clone())?;
    }
    let cfg: T = serde_path_to_error::deserialize(root).map_err(|e| {
        let path = e.path().to_string();
        let inner = e.into_inner();
        if path == "." {
            CliError::Config(inner.to_string())
        } else {
            CliError::Config(format!("{path}: {inner}"))
        }
    })?;
    let resolved = serde_json::to_value(&cfg)?;
    Ok((cfg, resolved))
}

fn set_path(root: &mut Value, path: &str, v: Value) -> Result<()> {
    let parts: Vec<&str> = path.split('.').collect();
    let (last, parents) = parts.split_last().expect("split yields one part");
    let mut cur = root;
    for part in parents {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{path}: parent is not an object")))?;
        cur = obj
            .entry(part.to_string())
            .or_insert_with(|| Value::Object(Map::new()));
    }
    cur.as_object_mut()
        .ok_or_else(|| CliError::Config(format!("{path}: parent is not an object")))?
        .insert(last.to_string(), v);
    Ok(())
}

fn invalid(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// How items are divided into train, validation and test.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum SplitConfig {
    /// Random assignment by fraction; test receives the rest.
    Fractions { train: f64, validation: f64 },
    /// Random assignment of exact counts; test receives the rest.
    Counts { train: usize, validation: usize },
    /// The first items by id go to train, the next to validation.
    Ordered { train: usize, validation: usize },
}

impl SplitConfig {
    pub fn apply(&self, ds: &mut Dataset, seed: u64) -> Result<()> {
        match *self {
            SplitConfig::Fractions { train, validation } => ds.assign_splits(train, validation, seed)?,
            SplitConfig::Counts { train, validation } => ds.assign_split_counts(train, validation, seed)?,
            SplitConfig::Ordered { train, validation } => {
                let n = ds.items.len();
                if train + validation > n {
                    return Err(invalid(format!(
                        "{train} train + {validation} validation items exceed {n}"
                    )));
                }
                let mut order: Vec<usize> = (0..n).collect();
                order.sort_by(|&a, &b| ds.items[a].id.cmp(&ds.items[b].id));
                for (rank, i) in order.into_iter().enumerate() {
                    ds.items[i].split = if rank < train {
                        Split::Train
                    } else if rank < train + validation {
                        Split::Validation
                    } else {
                        Split::Test
                    };
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub spec: SynthSpec,
    pub count: usize,
    pub seed: u64,
    pub split: SplitConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            spec: SynthSpec::default_2d(),
            count: 270,
            seed: 0,
            split: SplitConfig::Counts {
                train: 200,
                validation: 20,
            },
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(invalid("count must be >= 1"));
        }
        Ok(self.spec.validate()?)
    }
}

/// Ingestion of the ISBI cephalometric layout: one directory of TIFF
/// images and two directories of per-observer annotation files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IngestConfig {
    pub image_dir: PathBuf,
    pub annotation_dirs: Vec<PathBuf>,
    pub spacing_mm: f64,
    pub num_landmarks: usize,
    /// `null` accepts any image size.
    pub expected_extents: Option<[usize; 2]>,
    /// Resample images and landmarks to this isotropic spacing.
    pub resample_mm: Option<f64>,
    pub hist_equalize: bool,
    pub split: SplitConfig,
    pub seed: u64,
}

impl Default for IngestConfig {
    fn default() -> Self {
        Self {
            image_dir: PathBuf::new(),
            annotation_dirs: Vec::new(),
            spacing_mm: 0.1,
            num_landmarks: 19,
            expected_extents: Some(ISBI_EXTENTS),
            resample_mm: None,
            hist_equalize: false,
            split: SplitConfig::Ordered {
                train: 150,
                validation: 0,
            },
            seed: 0,
        }
    }
}

impl IngestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_dir.as_os_str().is_empty() {
            return Err(invalid("image_dir is required"));
        }
        if self.annotation_dirs.len() != 2 {
            return Err(invalid("annotation_dirs must name exactly two observer directories"));
        }
        if !(self.spacing_mm > 0.0) || self.resample_mm.is_some_and(|s| !(s > 0.0)) {
            return Err(invalid("spacings must be > 0"));
        }
        if self.num_landmarks == 0 {
            return Err(invalid("num_landmarks must be >= 1"));
        }
        Ok(())
    }
}

/// Overrides applied to the default architecture of a role.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    /// Pool before every block, for large 2D radiographs. Global role only.
    pub xray: bool,
    pub stem_channels: Option<usize>,
    pub block_widths: Option<Vec<usize>>,
    pub block_pairs: Option<Vec<usize>>,
    pub pool_before: Option<Vec<usize>>,
    pub head_width: Option<usize>,
}

impl ArchConfig {
    pub fn build(&self, role: NetworkRole, dims: usize, num_landmarks: usize, variant: Variant) -> Result<NetworkConfig> {
        let mut cfg = match role {
            NetworkRole::Global if self.xray => {
                if dims != 2 {
                    return Err(invalid("the xray architecture is 2D only"));
                }
                NetworkConfig::global_xray(num_landmarks)
            }
            NetworkRole::Global => NetworkConfig::global(dims, num_landmarks),
            NetworkRole::Local if self.xray => return Err(invalid("xray applies to global networks")),
            NetworkRole::Local => NetworkConfig::local(dims),
        };
        if let Some(c) = self.stem_channels {
            match cfg.stem.as_mut() {
                Some(stem) => stem.channels = c,
                None => return Err(invalid("this architecture has no stem")),
            }
        }
        if let Some(w) = &self.block_widths {
            cfg.block_widths = w.clone();
        }
        if let Some(p) = &self.block_pairs {
            cfg.block_pairs = p.clone();
        }
        if let Some(p) = &self.pool_before {
            cfg.pool_before = p.clone();
        }
        if let Some(h) = self.head_width {
            cfg.head_width = h;
        }
        variant.configure(&mut cfg);
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimization and architecture settings of one training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainParams {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub validation_interval: usize,
    pub lambda_cls: f64,
    pub validate_at_start: bool,
    pub log_interval: usize,
    pub seed: u64,
    /// Defaults to 64 voxels per axis for global and 16 for local networks.
    pub crop_extents: Option<Vec<usize>>,
    pub architecture: ArchConfig,
}

impl Default for TrainParams {
    fn default() -> Self {
        let t = TrainConfig::new(CropSpec {
            extents: Vec::new(),
            constraint: CropConstraint::None,
        });
        Self {
            iterations: t.iterations,
            batch_size: t.batch_size,
            learning_rate: t.learning_rate,
            beta1: t.beta1,
            beta2: t.beta2,
            epsilon: t.epsilon,
            validation_interval: t.validation_interval,
            lambda_cls: t.lambda_cls,
            validate_at_start: t.validate_at_start,
            log_interval: t.log_interval,
            seed: t.seed,
            crop_extents: None,
            architecture: ArchConfig::default(),
        }
    }
}

impl TrainParams {
    pub fn crop(&self, role: NetworkRole, dims: usize) -> Result<CropSpec> {
        let extents = match &self.crop_extents {
            Some(e) if e.len() != dims => {
                return Err(invalid(format!("crop_extents needs {dims} values, got {}", e.len())))
            }
            Some(e) => e.clone(),
            None => vec![if role == NetworkRole::Local { 16 } else { 64 }; dims],
        };
        let constraint = match role {
            NetworkRole::Local => CropConstraint::MustContainLandmark(0),
            NetworkRole::Global => CropConstraint::None,
        };
        Ok(CropSpec { extents, constraint })
    }

    pub fn train_config(&self, variant: Variant, crop: CropSpec) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            iterations: self.iterations,
            batch_size: self.batch_size,
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.epsilon,
            validation_interval: self.validation_interval,
            crop,
            lambda_cls: self.lambda_cls,
            variant,
            seed: self.seed,
            validate_at_start: self.validate_at_start,
            log_interval: self.log_interval,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainRunConfig {
    pub dataset: PathBuf,
    pub role: NetworkRole,
    /// Train on this landmark only. Required for local networks.
    pub landmark: Option<usize>,
    pub variant: Variant,
    pub training: TrainParams,
    /// Local validation starts from this global network's estimates.
    pub global_checkpoint: Option<PathBuf>,
    /// Without a global checkpoint, local validation starts from the truth
    /// displaced by up to this many voxels per axis.
    pub start_offset: f64,
}

impl Default for TrainRunConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            role: NetworkRole::Global,
            landmark: None,
            variant: Variant::default(),
            training: TrainParams::default(),
            global_checkpoint: None,
            start_offset: 4.0,
        }
    }
}

impl TrainRunConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            return Err(invalid("dataset is required"));
        }
        if self.role == NetworkRole::Local && self.landmark.is_none() {
            return Err(invalid("local networks need a landmark index"));
        }
        if self.role == NetworkRole::Global && self.global_checkpoint.is_some() {
            return Err(invalid("global_checkpoint only applies to local networks"));
        }
        if !(self.start_offset >= 0.0 && self.start_offset.is_finite()) {
            return Err(invalid("start_offset must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeConfig {
    pub dataset: PathBuf,
    pub split: Split,
    pub global_checkpoint: PathBuf,
    /// One entry per landmark; `null` leaves that landmark unrefined.
    pub local_checkpoints: Vec<Option<PathBuf>>,
    pub global_only: bool,
    /// Defaults to the fusion of the variant recorded in the checkpoint.
    pub global_fusion: Option<FusionMode>,
    pub local_fusion: Option<FusionMode>,
    /// Defaults to the crop size the local networks were trained on.
    pub local_extents: Option<Vec<usize>>,
}

impl Default for LocalizeConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            split: Split::Test,
            global_checkpoint: PathBuf::new(),
            local_checkpoints: Vec::new(),
            global_only: false,
            global_fusion: None,
            local_fusion: None,
            local_extents: None,
        }
    }
}

impl LocalizeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            return Err(invalid("dataset is required"));
        }
        if self.global_checkpoint.as_os_str().is_empty() {
            return Err(invalid("global_checkpoint is required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// A predictions file written by `localize`.
    pub predictions: PathBuf,
    /// Dataset directory holding the reference landmarks.
    pub references: PathBuf,
    /// SDR thresholds in mm.
    pub thresholds: SdrSpec,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            predictions: PathBuf::new(),
            references: PathBuf::new(),
            thresholds: SdrSpec::curve(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.predictions.as_os_str().is_empty() || self.references.as_os_str().is_empty() {
            return Err(invalid("predictions and references are required"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateConfig {
    pub dataset: PathBuf,
    pub variants: Vec<Variant>,
    /// Settings shared by every global network.
    pub global: TrainParams,
    /// Settings of the local networks of the proposed pipeline.
    pub local: TrainParams,
    /// Train local networks and report the global-to-local row.
    pub refine: bool,
    pub split: Split,
    pub thresholds: SdrSpec,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            dataset: PathBuf::new(),
            variants: Variant::ALL.to_vec(),
            global: TrainParams::default(),
            local: TrainParams::default(),
            refine: true,
            split: Split::Test,
            thresholds: SdrSpec::curve(),
        }
    }
}

impl AblateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset.as_os_str().is_empty() {
            return Err(invalid("dataset is required"));
        }
        if self.variants.is_empty() {
            return Err(invalid("variants must not be empty"));
        }
        if self.refine && !self.variants.contains(&Variant::RLogC) {
            return Err(invalid("refine requires the R_log+C variant"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn flag_overrides_file_overrides_default() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        std::fs::write(&p, r#"{"count": 10, "seed": 5}"#).unwrap();
        let (c, v): (SynthConfig, Value) = resolve(Some(&p), &[("seed", json!(9))]).unwrap();
        assert_eq!(c.count, 10);
        assert_eq!(c.seed, 9);
        assert_eq!(c.spec, SynthSpec::default_2d());
        assert_eq!(v["seed"], json!(9));
    }

    #[test]
    fn unknown_keys_are_named() {
        let err = resolve::<SynthConfig>(None, &[("bogus_key", json!(1))]).unwrap_err();
        assert!(err.to_string().contains("bogus_key"), "{err}");
        let err = resolve::<TrainRunConfig>(None, &[("training.iters", json!(1))]).unwrap_err();
        assert!(err.to_string().contains("iters"), "{err}");
        assert_eq!(err.exit_code(), 1);
    }

    #[test]
    fn nested_override_creates_objects() {
        let (c, _): (TrainRunConfig, Value) = resolve(
            None,
            &[("training.iterations", json!(7)), ("dataset", json!("d"))],
        )
        .unwrap();
        assert_eq!(c.training.iterations, 7);
        assert_eq!(c.training.batch_size, 4);
        c.validate().unwrap();
    }

    #[test]
    fn split_modes() {
        let spec = SynthSpec::default_2d();
        let mut ds = landmark_core::data::synth_generate(&spec, 10, 0).unwrap();
        SplitConfig::Ordered { train: 6, validation: 1 }.apply(&mut ds, 0).unwrap();
        let train: Vec<&str> = ds.split(Split::Train).map(|i| i.id.as_str()).collect();
        assert_eq!(train, ["synth_00000", "synth_00001", "synth_00002", "synth_00003", "synth_00004", "synth_00005"]);
        assert_eq!(ds.count(Split::Test), 3);
        SplitConfig::Fractions { train: 0.7, validation: 0.1 }.apply(&mut ds, 0).unwrap();
        assert_eq!((ds.count(Split::Train), ds.count(Split::Validation)), (7, 1));
        assert!(SplitConfig::Counts { train: 9, validation: 2 }.apply(&mut ds, 0).is_err());
        let v: SplitConfig = serde_json::from_value(json!({"counts": {"train": 2, "validation": 1}})).unwrap();
        assert_eq!(v, SplitConfig::Counts { train: 2, validation: 1 });
    }

    #[test]
    fn architecture_overrides() {
        let arch = ArchConfig {
            block_widths: Some(vec![16, 32, 64, 128]),
            head_width: Some(128),
            ..Default::default()
        };
        let cfg = arch.build(NetworkRole::Global, 2, 3, Variant::C).unwrap();
        assert_eq!(cfg.block_widths, vec![16, 32, 64, 128]);
        assert_eq!(cfg.grid_spacing(), 8);
        assert!(!cfg.regression_head);
        let bad = ArchConfig {
            block_pairs: Some(vec![1]),
            ..Default::default()
        };
        assert!(bad.build(NetworkRole::Global, 2, 3, Variant::R).is_err());
        let xray = ArchConfig { xray: true, ..Default::default() };
        assert_eq!(xray.build(NetworkRole::Global, 2, 19, Variant::RLogC).unwrap().grid_spacing(), 32);
        assert!(xray.build(NetworkRole::Local, 2, 1, Variant::RLogC).is_err());
    }

    #[test]
    fn crop_defaults_by_role() {
        let p = TrainParams::default();
        assert_eq!(p.crop(NetworkRole::Global, 2).unwrap().extents, vec![64, 64]);
        let local = p.crop(NetworkRole::Local, 3).unwrap();
        assert_eq!(local.extents, vec![16, 16, 16]);
        assert_eq!(local.constraint, CropConstraint::MustContainLandmark(0));
    }
}
