#![no_main]

use covtool_core::cli::{parse_config, RawConfig};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(raw) = RawConfig::parse(text) {
        // Building only validates; it must agree with the one-shot parser.
        assert_eq!(raw.build().is_ok(), parse_config(text).is_ok());
    }
});
