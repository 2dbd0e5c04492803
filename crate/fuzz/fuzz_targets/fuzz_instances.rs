//! Instance-prediction file parser: mask grids, score ranges and dimensions
//! are validated; accepted files must convert to masks and back losslessly.

#![no_main]
use libfuzzer_sys::fuzz_target;

const MAX_INPUT: usize = 1 << 18;

fuzz_target!(|data: &[u8]| {
    if data.len() > MAX_INPUT {
        return;
    }
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(file) = bgr_core::io::InstancesFile::parse(text) {
            let instances = file.to_instances().expect("parse validated conversion");
            let rebuilt =
                bgr_core::io::InstancesFile::from_instances(&instances, file.height, file.width)
                    .expect("masks share the declared dimensions");
            assert_eq!(rebuilt, file, "instances must round-trip");
            // Accepted instances must fuse without panicking when the
            // raster is small enough to allocate.
            let pixels = file.height.checked_mul(file.width);
            if pixels.is_some_and(|n| n <= 1 << 12) {
                let semantic = bgr_core::fusion::ClassRaster::new(
                    file.height,
                    file.width,
                    vec![9; file.height * file.width],
                )
                .unwrap();
                if let Ok(map) =
                    bgr_core::fusion::fuse(&instances, &semantic, &Default::default())
                {
                    map.validate().expect("fusion output is always consistent");
                }
            }
        }
    }
});
