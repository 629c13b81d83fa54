#![no_main]

use landmark_cli::commands::localize::PredictionsFile;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(preds) = serde_json::from_slice::<PredictionsFile>(data) else {
        return;
    };
    for img in &preds.images {
        let _ = img.to_landmark_set();
    }
    let text = serde_json::to_vec(&preds).expect("parsed predictions serialize");
    let _: PredictionsFile = serde_json::from_slice(&text).expect("round trip");
});
