#![no_main]

use landmark_core::data::store::{landmarks_from_json, landmarks_to_json};
use libfuzzer_sys::fuzz_target;

// Absent landmarks hold NaN placeholders, so compare serialized forms.
fuzz_target!(|data: &str| {
    if let Ok(lms) = landmarks_from_json(data) {
        let text = landmarks_to_json(&lms).expect("parsed landmarks serialize");
        let again = landmarks_from_json(&text).expect("round trip");
        assert_eq!(landmarks_to_json(&again).expect("serialize"), text);
    }
});
