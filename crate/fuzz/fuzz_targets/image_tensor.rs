#![no_main]

use landmark_core::data::store::{decode_image, encode_image};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_image(data) {
        assert_eq!(encode_image(&img), data);
    }
});
