//! Every command configuration, parsed and validated from the same bytes.

#![no_main]

use landmark_cli::config::{AblateConfig, EvalConfig, IngestConfig, LocalizeConfig, SynthConfig, TrainRunConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(c) = serde_json::from_slice::<SynthConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<IngestConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<TrainRunConfig>(data) {
        if c.validate().is_ok() {
            if let Ok(crop) = c.training.crop(c.role, 2) {
                let _ = c.training.train_config(c.variant, crop);
            }
        }
    }
    if let Ok(c) = serde_json::from_slice::<LocalizeConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<EvalConfig>(data) {
        let _ = c.validate();
    }
    if let Ok(c) = serde_json::from_slice::<AblateConfig>(data) {
        let _ = c.validate();
    }
});
