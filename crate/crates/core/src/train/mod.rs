//! Losses, optimization, validation-driven model selection and gradient
//! checking.

pub mod adam;
pub mod gradcheck;
pub mod loss;
pub mod trainer;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::localize::FusionMode;
use crate::model::NetworkConfig;
use crate::sampling::CropSpec;
use crate::targets::DisplacementEncoding;

pub use adam::Adam;
pub use gradcheck::{grad_check, grad_check_mixed, GradCheckReport, LinearHeads, Trainable};
pub use loss::{batch_loss_grad, loss, LossTerms};
pub use trainer::{
    prepare_samples, train_loop, GlobalValidator, LocalValidator, LogEntry, TrainLog, TrainOutcome,
    TrainOutputs, TrainSample, Validator,
};

/// Ablation variants of the loss and fusion scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Variant {
    /// Raw-displacement regression only, uniform fusion.
    #[serde(rename = "R")]
    R,
    /// Log-displacement regression only, uniform fusion.
    #[serde(rename = "R_log")]
    RLog,
    /// Classification only; landmarks are probability-weighted cell centers.
    #[serde(rename = "C")]
    C,
    /// Raw-displacement regression with classification weighting.
    #[serde(rename = "R+C")]
    RC,
    /// Log-displacement regression with classification weighting.
    #[default]
    #[serde(rename = "R_log+C")]
    RLogC,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::R, Variant::RLog, Variant::C, Variant::RC, Variant::RLogC];

    pub fn label(self) -> &'static str {
        match self {
            Variant::R => "R",
            Variant::RLog => "R_log",
            Variant::C => "C",
            Variant::RC => "R+C",
            Variant::RLogC => "R_log+C",
        }
    }

    pub fn encoding(self) -> DisplacementEncoding {
        match self {
            Variant::R | Variant::RC => DisplacementEncoding::Raw,
            Variant::RLog | Variant::C | Variant::RLogC => DisplacementEncoding::Log,
        }
    }

    pub fn has_regression(self) -> bool {
        self != Variant::C
    }

    pub fn has_classification_loss(self) -> bool {
        !matches!(self, Variant::R | Variant::RLog)
    }

    /// Classification weight given the configured default.
    pub fn lambda(self, configured: f64) -> f64 {
        if self.has_classification_loss() {
            configured
        } else {
            0.0
        }
    }

    pub fn fusion(self) -> FusionMode {
        match self {
            Variant::R | Variant::RLog => FusionMode::Uniform,
            Variant::C => FusionMode::CentersWeighted,
            Variant::RC | Variant::RLogC => FusionMode::Weighted,
        }
    }

    /// Set the encoding and head layout of `cfg` for this variant.
    pub fn configure(self, cfg: &mut NetworkConfig) {
        cfg.encoding = self.encoding();
        cfg.regression_head = self.has_regression();
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.label())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.label().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::InvalidConfig(format!("unknown variant {s:?}")))
    }
}

fn default_iterations() -> usize {
    300_000
}
fn default_batch() -> usize {
    4
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}
fn default_interval() -> usize {
    10_000
}
fn default_lambda() -> f64 {
    1.0
}
fn default_true() -> bool {
    true
}
fn default_log_interval() -> usize {
    100
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub epsilon: f64,
    #[serde(default = "default_interval")]
    pub validation_interval: usize,
    pub crop: CropSpec,
    /// Weight of the classification term; forced to 0 by the `R` variants.
    #[serde(default = "default_lambda")]
    pub lambda_cls: f64,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub seed: u64,
    /// Also validate the untrained network, giving an iteration-0 baseline.
    #[serde(default = "default_true")]
    pub validate_at_start: bool,
    /// Training loss is averaged and logged every this many iterations.
    #[serde(default = "default_log_interval")]
    pub log_interval: usize,
}

impl TrainConfig {
    pub fn new(crop: CropSpec) -> Self {
        Self {
            iterations: default_iterations(),
            batch_size: default_batch(),
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_eps(),
            validation_interval: default_interval(),
            crop,
            lambda_cls: default_lambda(),
            variant: Variant::default(),
            seed: 0,
            validate_at_start: true,
            log_interval: default_log_interval(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.validation_interval == 0 {
            return bad("validation_interval must be >= 1");
        }
        if self.iterations < self.validation_interval {
            return bad("iterations must be >= validation_interval");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        if self.log_interval == 0 {
            return bad("log_interval must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if !(self.lambda_cls >= 0.0 && self.lambda_cls.is_finite()) {
            return bad("lambda_cls must be >= 0");
        }
        if self.crop.extents.contains(&0) {
            return bad("crop extents must be >= 1");
        }
        Ok(())
    }

    pub fn effective_lambda(&self) -> f64 {
        self.variant.lambda(self.lambda_cls)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn variant_semantics() {
        assert_eq!(Variant::RLog.lambda(1.0), 0.0);
        assert_eq!(Variant::RLog.encoding(), DisplacementEncoding::Log);
        assert_eq!(Variant::R.encoding(), DisplacementEncoding::Raw);
        assert_eq!(Variant::RC.lambda(1.0), 1.0);
        assert!(!Variant::C.has_regression());
        assert_eq!(Variant::C.fusion(), FusionMode::CentersWeighted);
        for v in Variant::ALL {
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.label()));
            assert_eq!(v.label().parse::<Variant>().unwrap(), v);
        }
    }

    #[test]
    fn config_defaults_and_validation() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"crop": {"extents": [64, 64]}}"#).unwrap();
        assert_eq!(cfg.iterations, 300_000);
        assert_eq!(cfg.batch_size, 4);
        assert_eq!(cfg.learning_rate, 0.001);
        assert_eq!(cfg.validation_interval, 10_000);
        assert_eq!(cfg.variant, Variant::RLogC);
        cfg.validate().unwrap();
        assert!(serde_json::from_str::<TrainConfig>(r#"{"crop": {"extents": [8]}, "lr": 1}"#).is_err());
        let mut c = cfg.clone();
        c.iterations = 5;
        assert!(c.validate().is_err());
        let mut c = cfg;
        c.learning_rate = 0.0;
        assert!(c.validate().is_err());
    }
}
