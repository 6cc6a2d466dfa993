#![no_main]

use libfuzzer_sys::fuzz_target;
use tdm::synth::io::parse_manifest;

fuzz_target!(|data: &[u8]| {
    if let Ok(m) = parse_manifest(data) {
        let text = serde_json::to_vec(&m).unwrap();
        assert_eq!(parse_manifest(&text).unwrap(), m);
    }
});
