//! BGRM matrix decoder: arbitrary bytes must never panic, and every
//! accepted matrix must re-encode to the identical bytes.

#![no_main]
use libfuzzer_sys::fuzz_target;

const MAX_INPUT: usize = 1 << 20;

fuzz_target!(|data: &[u8]| {
    if data.len() > MAX_INPUT {
        return;
    }
    if let Ok(mat) = bgr_core::io::read_bgrm(data) {
        let bytes = bgr_core::io::write_bgrm(&mat).expect("accepted matrices are finite");
        assert_eq!(bytes, data, "decode/encode must round-trip bit-exactly");
        // Accepted matrices also feed the semantic-raster reader; it must
        // reject or accept without panicking.
        let _ = bgr_core::io::class_raster_from_mat(&mat);
    }
});
