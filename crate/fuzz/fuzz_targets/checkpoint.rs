//! Checkpoint decoding. Parsed checkpoints must re-encode to the same bytes.

#![no_main]

use landmark_core::model::Checkpoint;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = Checkpoint::from_bytes(data) else {
        return;
    };
    let bytes = ckpt.to_bytes().expect("parsed checkpoint re-encodes");
    let again = Checkpoint::from_bytes(&bytes).expect("re-encoded checkpoint parses");
    assert_eq!(again.tensors.len(), ckpt.tensors.len());
    // Building the network allocates what the header asks for; keep it small.
    let c = &ckpt.config;
    let small = c.num_landmarks <= 8
        && c.head_width <= 64
        && c.block_widths.len() <= 6
        && c.block_widths.iter().all(|&w| w <= 64)
        && c.block_pairs.iter().all(|&p| p <= 4)
        && c.stem.as_ref().is_none_or(|s| s.kernel <= 7 && s.channels <= 64);
    if small {
        let _ = ckpt.into_network();
    }
});
