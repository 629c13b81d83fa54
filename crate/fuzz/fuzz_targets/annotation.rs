#![no_main]

use landmark_core::data::parse_annotation;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &str| {
    if let Ok(points) = parse_annotation(data, 19) {
        assert_eq!(points.len(), 19);
        assert!(points.iter().flatten().all(|v| v.is_finite()));
    }
});
