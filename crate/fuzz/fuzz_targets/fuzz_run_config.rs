//! Run-configuration parser: arbitrary JSON must parse-or-reject without
//! panicking, and accepted configs must survive a serialize/parse cycle.

#![no_main]
use libfuzzer_sys::fuzz_target;

const MAX_INPUT: usize = 1 << 16;

fuzz_target!(|data: &[u8]| {
    if data.len() > MAX_INPUT {
        return;
    }
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(cfg) = bgr_core::config::RunConfig::parse(text) {
            let json = serde_json::to_string(&cfg).expect("valid config serializes");
            let back = bgr_core::config::RunConfig::parse(&json).expect("own output parses");
            assert_eq!(back, cfg, "config must survive a round-trip");
        }
    }
});
