//! BGRP raster decoder plus the segment-table validator.
//!
//! The input is split: the first part is decoded as a raster, the remainder
//! parsed as a segment-table JSON; any combination is assembled through the
//! validating constructor, which must reject inconsistencies instead of
//! panicking. A synthesized consistent table must always be accepted.

#![no_main]
use libfuzzer_sys::fuzz_target;

use bgr_core::fusion::Segment;

const MAX_INPUT: usize = 1 << 20;

fuzz_target!(|data: &[u8]| {
    if data.len() > MAX_INPUT {
        return;
    }
    if let Ok((h, w, ids)) = bgr_core::io::read_bgrp_raster(data) {
        // A table synthesized from the raster itself must validate, as long
        // as the ids are dense from 1.
        let mut counts = std::collections::BTreeMap::new();
        for &id in &ids {
            if id != 0 {
                *counts.entry(id).or_insert(0u64) += 1;
            }
        }
        let dense = counts.keys().enumerate().all(|(i, &id)| id == (i + 1) as u32);
        let segments: Vec<Segment> = counts
            .iter()
            .map(|(&id, &area)| Segment {
                id,
                class_id: id % 7,
                is_thing: id % 2 == 0,
                area,
            })
            .collect();
        let assembled = bgr_core::io::panoptic_from_parts(h, w, ids.clone(), segments);
        assert_eq!(assembled.is_ok(), dense);
        // An inconsistent table must be rejected, not panic.
        let bogus = vec![Segment {
            id: u32::MAX,
            class_id: 0,
            is_thing: true,
            area: 1,
        }];
        let _ = bgr_core::io::panoptic_from_parts(h, w, ids, bogus);
    }
    if let Ok(text) = std::str::from_utf8(data) {
        let _ = bgr_core::io::parse_segment_table(text);
    }
});
