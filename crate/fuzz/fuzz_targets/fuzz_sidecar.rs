//! Feature/score map sidecar parser.

#![no_main]
use libfuzzer_sys::fuzz_target;

const MAX_INPUT: usize = 1 << 14;

fuzz_target!(|data: &[u8]| {
    if data.len() > MAX_INPUT {
        return;
    }
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(sidecar) = bgr_core::io::MapSidecar::parse(text) {
            assert_eq!(sidecar.layout, "CHW");
            assert!(sidecar.channels >= 1 && sidecar.height >= 1 && sidecar.width >= 1);
        }
    }
});
