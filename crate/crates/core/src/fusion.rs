//! Panoptic fusion: combine scored instance masks with a semantic raster
//! into a single panoptic map.
//!
//! Instances below the score threshold are dropped; survivors claim pixels
//! greedily in descending score order and are discarded when too little of
//! their mask is still unclaimed. Remaining pixels take their semantic stuff
//! label, one segment per class, with small stuff segments relabeled void.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BitMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl BitMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height.checked_mul(width).is_none_or(|n| bits.len() != n) {
            return Err(Error::shape(
                "BitMask::new",
                format!("{height}x{width}"),
                format!("{} bits", bits.len()),
            ));
        }
        Ok(BitMask {
            height,
            width,
            bits,
        })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        BitMask {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.bits[y * self.width + x] = v;
    }

    pub fn count(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Deterministic FNV-1a content hash, used as the canonical tie-break
    /// when two instances carry exactly equal scores.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        let mut mix = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x100000001b3);
        };
        for &b in [self.height, self.width].iter() {
            for byte in (b as u64).to_le_bytes() {
                mix(byte);
            }
        }
        for &bit in &self.bits {
            mix(bit as u8);
        }
        h
    }

    /// Mask translated by (dy, dx); pixels shifted outside vanish.
    pub fn shifted(&self, dy: isize, dx: isize) -> BitMask {
        let mut out = BitMask::empty(self.height, self.width);
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.get(y, x) {
                    continue;
                }
                let ny = y as isize + dy;
                let nx = x as isize + dx;
                if ny >= 0 && nx >= 0 && (ny as usize) < self.height && (nx as usize) < self.width {
                    out.set(ny as usize, nx as usize, true);
                }
            }
        }
        out
    }
}

/// One scored instance mask entering fusion.
#[derive(Debug, Clone)]
pub struct InstancePrediction {
    pub mask: BitMask,
    pub class_id: u32,
    pub score: f64,
}

impl InstancePrediction {
    pub fn new(mask: BitMask, class_id: u32, score: f64) -> Result<Self> {
        if mask.count() == 0 {
            return Err(Error::Config("instance mask must be non-empty".into()));
        }
        if !score.is_finite() || !(0.0..=1.0).contains(&score) {
            return Err(Error::Config(format!(
                "instance score must lie in [0,1], got {score}"
            )));
        }
        Ok(InstancePrediction {
            mask,
            class_id,
            score,
        })
    }
}

/// Per-pixel semantic class raster (the stuff branch's argmax output).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassRaster {
    height: usize,
    width: usize,
    classes: Vec<u32>,
}

impl ClassRaster {
    pub fn new(height: usize, width: usize, classes: Vec<u32>) -> Result<Self> {
        if height.checked_mul(width).is_none_or(|n| classes.len() != n) {
            return Err(Error::shape(
                "ClassRaster::new",
                format!("{height}x{width}"),
                format!("{} values", classes.len()),
            ));
        }
        Ok(ClassRaster {
            height,
            width,
            classes,
        })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.classes[y * self.width + x]
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.classes
    }
}

/// One entry of the panoptic segment table.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Segment {
    pub id: u32,
    pub class_id: u32,
    pub is_thing: bool,
    pub area: u64,
}

/// Per-pixel segment ids (0 = void) plus the segment table.
#[derive(Debug, Clone, PartialEq)]
pub struct PanopticMap {
    height: usize,
    width: usize,
    ids: Vec<u32>,
    segments: Vec<Segment>,
}

impl PanopticMap {
    pub fn new(height: usize, width: usize, ids: Vec<u32>, segments: Vec<Segment>) -> Result<Self> {
        if height.checked_mul(width).is_none_or(|n| ids.len() != n) {
            return Err(Error::shape(
                "PanopticMap::new",
                format!("{height}x{width}"),
                format!("{} ids", ids.len()),
            ));
        }
        let map = PanopticMap {
            height,
            width,
            ids,
            segments,
        };
        map.validate()?;
        Ok(map)
    }

    /// Invariants: table ids are dense from 1 with no duplicates, every
    /// nonzero raster id has a table entry, and each entry's area equals its
    /// raster pixel count.
    pub fn validate(&self) -> Result<()> {
        let mut sorted: Vec<u32> = self.segments.iter().map(|s| s.id).collect();
        sorted.sort_unstable();
        for (i, &id) in sorted.iter().enumerate() {
            if id != (i + 1) as u32 {
                return Err(Error::Config(format!(
                    "segment ids must be dense from 1, found {sorted:?}"
                )));
            }
        }
        let mut counts: BTreeMap<u32, u64> = BTreeMap::new();
        for &id in &self.ids {
            if id != 0 {
                *counts.entry(id).or_insert(0) += 1;
            }
        }
        for (&id, &count) in &counts {
            let seg = self
                .segments
                .iter()
                .find(|s| s.id == id)
                .ok_or_else(|| Error::Config(format!("raster id {id} missing from segment table")))?;
            if seg.area != count {
                return Err(Error::Config(format!(
                    "segment {id} area {} does not match raster count {count}",
                    seg.area
                )));
            }
        }
        for seg in &self.segments {
            if !counts.contains_key(&seg.id) {
                return Err(Error::Config(format!(
                    "segment {} has no raster pixels",
                    seg.id
                )));
            }
        }
        Ok(())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    #[inline]
    pub fn id_at(&self, y: usize, x: usize) -> u32 {
        self.ids[y * self.width + x]
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, id: u32) -> Option<&Segment> {
        self.segments.iter().find(|s| s.id == id)
    }
}

/// Fusion thresholds. `min_stuff_area: None` applies the default rule:
/// 4096 pixels, scaled to 1% of the image for rasters below 4096 pixels.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub score_thresh: f64,
    pub keep_frac: f64,
    pub min_stuff_area: Option<u64>,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            score_thresh: 0.5,
            keep_frac: 0.5,
            min_stuff_area: None,
        }
    }
}

impl FusionConfig {
    pub fn effective_min_stuff_area(&self, pixel_count: usize) -> u64 {
        match self.min_stuff_area {
            Some(v) => v,
            None if pixel_count < 4096 => (pixel_count as f64 * 0.01).round() as u64,
            None => 4096,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !self.score_thresh.is_finite() || !self.keep_frac.is_finite() {
            return Err(Error::Config("fusion thresholds must be finite".into()));
        }
        if !(0.0..=1.0).contains(&self.keep_frac) {
            return Err(Error::Config(format!(
                "keep_frac must lie in [0,1], got {}",
                self.keep_frac
            )));
        }
        Ok(())
    }
}

/// Greedy NMS-like fusion of instance predictions over a semantic raster.
pub fn fuse(
    instances: &[InstancePrediction],
    semantic: &ClassRaster,
    cfg: &FusionConfig,
) -> Result<PanopticMap> {
    cfg.validate()?;
    let (h, w) = (semantic.height(), semantic.width());
    for (i, inst) in instances.iter().enumerate() {
        if inst.mask.height() != h || inst.mask.width() != w {
            return Err(Error::shape(
                "fuse",
                format!("{h}x{w} semantic raster"),
                format!(
                    "instance {i} mask {}x{}",
                    inst.mask.height(),
                    inst.mask.width()
                ),
            ));
        }
        if !inst.score.is_finite() {
            return Err(Error::Config(format!("instance {i} score is not finite")));
        }
    }

    // Descending score; exact ties fall back to the canonical mask-content
    // ordering so the result is invariant to the input order.
    let mut order: Vec<usize> = (0..instances.len())
        .filter(|&i| instances[i].score >= cfg.score_thresh)
        .collect();
    let hashes: Vec<u64> = instances.iter().map(|i| i.mask.content_hash()).collect();
    order.sort_by(|&a, &b| {
        instances[b]
            .score
            .partial_cmp(&instances[a].score)
            .expect("scores are finite")
            .then_with(|| hashes[a].cmp(&hashes[b]))
            .then_with(|| instances[a].mask.bits().cmp(instances[b].mask.bits()))
            .then_with(|| instances[a].class_id.cmp(&instances[b].class_id))
    });

    let mut ids = vec![0u32; h * w];
    let mut segments = Vec::new();
    let mut next_id = 1u32;
    for &i in &order {
        let inst = &instances[i];
        let total = inst.mask.count();
        if total == 0 {
            continue;
        }
        let claim: Vec<usize> = (0..h * w)
            .filter(|&p| inst.mask.bits()[p] && ids[p] == 0)
            .collect();
        if claim.is_empty() || (claim.len() as f64) < cfg.keep_frac * (total as f64) {
            continue;
        }
        for &p in &claim {
            ids[p] = next_id;
        }
        segments.push(Segment {
            id: next_id,
            class_id: inst.class_id,
            is_thing: true,
            area: claim.len() as u64,
        });
        next_id += 1;
    }

    // Stuff fill-in: one segment per class over the unclaimed pixels.
    let min_area = cfg.effective_min_stuff_area(h * w);
    let mut per_class: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for p in 0..h * w {
        if ids[p] == 0 {
            per_class
                .entry(semantic.as_slice()[p])
                .or_default()
                .push(p);
        }
    }
    for (class_id, pixels) in per_class {
        if (pixels.len() as u64) < min_area {
            continue; // relabeled void
        }
        for &p in &pixels {
            ids[p] = next_id;
        }
        segments.push(Segment {
            id: next_id,
            class_id,
            is_thing: false,
            area: pixels.len() as u64,
        });
        next_id += 1;
    }

    PanopticMap::new(h, w, ids, segments)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rect_mask(h: usize, w: usize, y0: usize, x0: usize, y1: usize, x1: usize) -> BitMask {
        let mut m = BitMask::empty(h, w);
        for y in y0..y1 {
            for x in x0..x1 {
                m.set(y, x, true);
            }
        }
        m
    }

    fn uniform_raster(h: usize, w: usize, class: u32) -> ClassRaster {
        ClassRaster::new(h, w, vec![class; h * w]).unwrap()
    }

    #[test]
    fn no_instances_uniform_stuff() {
        let semantic = uniform_raster(8, 8, 7);
        let out = fuse(&[], &semantic, &FusionConfig::default()).unwrap();
        assert_eq!(out.segments().len(), 1);
        let seg = &out.segments()[0];
        assert_eq!(seg.class_id, 7);
        assert!(!seg.is_thing);
        assert_eq!(seg.area, 64);
        assert!(out.ids().iter().all(|&id| id == 1));
    }

    #[test]
    fn full_overlap_suppresses_lower_score() {
        let m = rect_mask(6, 6, 1, 1, 4, 4);
        let instances = vec![
            InstancePrediction::new(m.clone(), 2, 0.9).unwrap(),
            InstancePrediction::new(m, 2, 0.8).unwrap(),
        ];
        let semantic = uniform_raster(6, 6, 5);
        let out = fuse(&instances, &semantic, &FusionConfig::default()).unwrap();
        let things: Vec<_> = out.segments().iter().filter(|s| s.is_thing).collect();
        assert_eq!(things.len(), 1);
        assert_eq!(things[0].area, 9);
    }

    #[test]
    fn below_threshold_instances_are_dropped() {
        let m = rect_mask(6, 6, 0, 0, 2, 2);
        let instances = vec![InstancePrediction::new(m, 1, 0.4).unwrap()];
        let semantic = uniform_raster(6, 6, 5);
        let out = fuse(&instances, &semantic, &FusionConfig::default()).unwrap();
        assert!(out.segments().iter().all(|s| !s.is_thing));
    }

    #[test]
    fn small_stuff_becomes_void() {
        // 10x10 raster: 99 pixels of class 3, one pixel of class 4.
        let mut classes = vec![3u32; 100];
        classes[55] = 4;
        let semantic = ClassRaster::new(10, 10, classes).unwrap();
        let cfg = FusionConfig {
            min_stuff_area: Some(5),
            ..FusionConfig::default()
        };
        let out = fuse(&[], &semantic, &cfg).unwrap();
        assert_eq!(out.segments().len(), 1);
        assert_eq!(out.segments()[0].class_id, 3);
        assert_eq!(out.ids()[55], 0, "tiny stuff segment must be void");
    }

    #[test]
    fn min_stuff_area_rule_scales_for_small_rasters() {
        let cfg = FusionConfig::default();
        assert_eq!(cfg.effective_min_stuff_area(100), 1);
        assert_eq!(cfg.effective_min_stuff_area(144), 1);
        assert_eq!(cfg.effective_min_stuff_area(3600), 36);
        assert_eq!(cfg.effective_min_stuff_area(4096), 4096);
        assert_eq!(cfg.effective_min_stuff_area(1 << 20), 4096);
    }

    /// Simulates the greedy claim loop pixel-by-pixel with its own ordering
    /// and bookkeeping.
    fn fuse_oracle(
        instances: &[InstancePrediction],
        semantic: &ClassRaster,
        cfg: &FusionConfig,
    ) -> (Vec<u32>, Vec<Segment>) {
        let (h, w) = (semantic.height(), semantic.width());
        let mut idx: Vec<usize> = (0..instances.len())
            .filter(|&i| instances[i].score >= cfg.score_thresh)
            .collect();
        idx.sort_by(|&a, &b| {
            instances[b]
                .score
                .partial_cmp(&instances[a].score)
                .unwrap()
                .then_with(|| {
                    instances[a]
                        .mask
                        .content_hash()
                        .cmp(&instances[b].mask.content_hash())
                })
                .then_with(|| instances[a].mask.bits().cmp(instances[b].mask.bits()))
                .then_with(|| instances[a].class_id.cmp(&instances[b].class_id))
        });
        let mut ids = vec![0u32; h * w];
        let mut segs = Vec::new();
        let mut next = 1u32;
        for &i in &idx {
            let mut claimed = Vec::new();
            let mut total = 0u64;
            for p in 0..h * w {
                if instances[i].mask.bits()[p] {
                    total += 1;
                    if ids[p] == 0 {
                        claimed.push(p);
                    }
                }
            }
            if claimed.is_empty() || (claimed.len() as f64) < cfg.keep_frac * total as f64 {
                continue;
            }
            for &p in &claimed {
                ids[p] = next;
            }
            segs.push(Segment {
                id: next,
                class_id: instances[i].class_id,
                is_thing: true,
                area: claimed.len() as u64,
            });
            next += 1;
        }
        let min_area = cfg.effective_min_stuff_area(h * w);
        let mut classes: Vec<u32> = semantic.as_slice().to_vec();
        classes.sort_unstable();
        classes.dedup();
        for class in classes {
            let pixels: Vec<usize> = (0..h * w)
                .filter(|&p| ids[p] == 0 && semantic.as_slice()[p] == class)
                .collect();
            if pixels.is_empty() || (pixels.len() as u64) < min_area {
                continue;
            }
            for &p in &pixels {
                ids[p] = next;
            }
            segs.push(Segment {
                id: next,
                class_id: class,
                is_thing: false,
                area: pixels.len() as u64,
            });
            next += 1;
        }
        (ids, segs)
    }

    fn random_instances(r: &mut ChaCha8Rng, h: usize, w: usize, count: usize) -> Vec<InstancePrediction> {
        (0..count)
            .map(|_| {
                let y0 = r.random_range(0..h - 2);
                let x0 = r.random_range(0..w - 2);
                let y1 = (y0 + r.random_range(2..5)).min(h);
                let x1 = (x0 + r.random_range(2..5)).min(w);
                InstancePrediction::new(
                    rect_mask(h, w, y0, x0, y1, x1),
                    r.random_range(0..3),
                    (r.random_range(0..=100) as f64) / 100.0,
                )
                .unwrap()
            })
            .collect()
    }

    #[test]
    fn matches_greedy_simulation_oracle() {
        let mut r = rng(21);
        for _ in 0..50 {
            let insts = random_instances(&mut r, 10, 10, 3);
            let classes: Vec<u32> = (0..100).map(|_| 10 + r.random_range(0..3)).collect();
            let semantic = ClassRaster::new(10, 10, classes).unwrap();
            let cfg = FusionConfig {
                min_stuff_area: Some(3),
                ..FusionConfig::default()
            };
            let got = fuse(&insts, &semantic, &cfg).unwrap();
            let (ids, segs) = fuse_oracle(&insts, &semantic, &cfg);
            assert_eq!(got.ids(), &ids[..]);
            assert_eq!(got.segments(), &segs[..]);
        }
    }

    #[test]
    fn permutation_invariance_with_equal_scores() {
        let mut r = rng(22);
        for trial in 0..20 {
            let mut insts = random_instances(&mut r, 10, 10, 4);
            // Force some exact score ties.
            insts[1].score = insts[0].score;
            let classes: Vec<u32> = (0..100).map(|_| 20 + r.random_range(0..2)).collect();
            let semantic = ClassRaster::new(10, 10, classes).unwrap();
            let cfg = FusionConfig::default();
            let base = fuse(&insts, &semantic, &cfg).unwrap();
            let mut shuffled = insts.clone();
            shuffled.reverse();
            shuffled.swap(0, 2);
            let permuted = fuse(&shuffled, &semantic, &cfg).unwrap();
            assert_eq!(base, permuted, "trial {trial}");
        }
    }

    #[test]
    fn raising_threshold_never_adds_thing_segments() {
        let mut r = rng(23);
        for _ in 0..20 {
            let insts = random_instances(&mut r, 10, 10, 5);
            let semantic = uniform_raster(10, 10, 9);
            let mut prev = usize::MAX;
            for thresh in [0.0, 0.25, 0.5, 0.75, 1.0] {
                let cfg = FusionConfig {
                    score_thresh: thresh,
                    ..FusionConfig::default()
                };
                let out = fuse(&insts, &semantic, &cfg).unwrap();
                let things = out.segments().iter().filter(|s| s.is_thing).count();
                assert!(things <= prev, "thresh {thresh} grew thing count");
                prev = things;
            }
        }
    }

    #[test]
    fn determinism() {
        let mut r = rng(24);
        let insts = random_instances(&mut r, 10, 10, 4);
        let semantic = uniform_raster(10, 10, 3);
        let a = fuse(&insts, &semantic, &FusionConfig::default()).unwrap();
        let b = fuse(&insts, &semantic, &FusionConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_inputs_produce_all_void_map() {
        let semantic = ClassRaster::new(0, 0, vec![]).unwrap();
        let out = fuse(&[], &semantic, &FusionConfig::default()).unwrap();
        assert_eq!(out.segments().len(), 0);
        assert!(out.ids().is_empty());
    }

    #[test]
    fn mismatched_mask_shape_is_rejected() {
        let inst = InstancePrediction::new(rect_mask(4, 4, 0, 0, 2, 2), 0, 0.9).unwrap();
        let semantic = uniform_raster(5, 5, 1);
        assert!(fuse(&[inst], &semantic, &FusionConfig::default()).is_err());
    }

    #[test]
    fn panoptic_map_validation_catches_corruption() {
        let semantic = uniform_raster(4, 4, 2);
        let ok = fuse(&[], &semantic, &FusionConfig::default()).unwrap();
        // Dense-from-1 violation.
        let mut segments = ok.segments().to_vec();
        segments[0].id = 3;
        let mut ids = ok.ids().to_vec();
        for v in ids.iter_mut() {
            *v = 3;
        }
        assert!(PanopticMap::new(4, 4, ids, segments).is_err());
        // Area mismatch.
        let mut segments = ok.segments().to_vec();
        segments[0].area = 2;
        assert!(PanopticMap::new(4, 4, ok.ids().to_vec(), segments).is_err());
    }
}
