#![no_main]

use libfuzzer_sys::fuzz_target;
use tdm::denoiser::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    if let Ok(model) = decode_checkpoint(data) {
        let bytes = encode_checkpoint(&model);
        assert_eq!(decode_checkpoint(&bytes).unwrap(), model);
    }
});
