#![no_main]

use libfuzzer_sys::fuzz_target;
use tdm::synth::io::{decode_raw_frame, encode_raw_frame};

// The first three bytes pick the [C, H, W] shape; the rest is the dump.
fuzz_target!(|data: &[u8]| {
    let Some((head, body)) = data.split_first_chunk::<3>() else {
        return;
    };
    let shape = [1 + head[0] as usize % 4, 1 + head[1] as usize, 1 + head[2] as usize];
    if let Ok(frame) = decode_raw_frame(body, shape) {
        assert_eq!(encode_raw_frame(&frame), body);
    }
});
