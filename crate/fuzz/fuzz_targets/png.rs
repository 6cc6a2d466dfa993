#![no_main]

use libfuzzer_sys::fuzz_target;
use tdm::synth::io::{decode_png_frame, encode_png_frame};

fuzz_target!(|data: &[u8]| {
    if let Ok(frame) = decode_png_frame(data) {
        let again = decode_png_frame(&encode_png_frame(&frame).unwrap()).unwrap();
        assert_eq!(again, frame);
    }
});
