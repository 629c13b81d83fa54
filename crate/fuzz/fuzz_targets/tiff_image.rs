#![no_main]

use landmark_core::data::isbi::decode_tiff;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    if let Ok(img) = decode_tiff(data, 0.1) {
        assert_eq!(img.dims(), 2);
        assert_eq!(img.len(), img.extents().iter().product::<usize>());
    }
});
