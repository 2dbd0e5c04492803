//! Checkpoint-manifest parser: version, structure and generator settings
//! are all validated; no input may panic the parser.

#![no_main]
use libfuzzer_sys::fuzz_target;

const MAX_INPUT: usize = 1 << 16;

fuzz_target!(|data: &[u8]| {
    if data.len() > MAX_INPUT {
        return;
    }
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(manifest) = bgr_core::io::CheckpointManifest::parse(text) {
            let json = serde_json::to_string(&manifest).expect("valid manifest serializes");
            let back = bgr_core::io::CheckpointManifest::parse(&json).expect("own output parses");
            assert_eq!(back, manifest);
        }
    }
});
