#![no_main]

use libfuzzer_sys::fuzz_target;
use tdm::cli::parse_settings_json;

fuzz_target!(|data: &[u8]| {
    if let Ok(settings) = parse_settings_json(data) {
        let text = serde_json::to_vec(&settings).unwrap();
        assert_eq!(parse_settings_json(&text).unwrap(), settings);
    }
});
