#![no_main]

use landmark_core::data::Manifest;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(m) = Manifest::from_json(data) {
        let text = m.to_json().expect("parsed manifest serializes");
        let _ = Manifest::from_json(&text).expect("round trip");
    }
});
