//! Panoptic quality.
//!
//! Segments match when they share a class and their IoU exceeds 0.5; such
//! matches are provably unique per segment. Void pixels (gt id 0) are
//! excluded from IoU denominators, and predictions lying mostly on void are
//! exempt from false-positive counting. Per-image counts are mergeable
//! before ratios are derived, so multi-scene evaluation sums TP/FP/FN/IoU
//! first and finalizes once.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::PanopticMap;

/// Declares the class vocabulary: index = class id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassTable {
    pub classes: Vec<ClassDef>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassDef {
    pub name: String,
    pub is_thing: bool,
}

impl ClassTable {
    /// `thing_count` thing classes (ids 0..) followed by `stuff_count` stuff
    /// classes.
    pub fn with_counts(thing_count: usize, stuff_count: usize) -> Self {
        let mut classes = Vec::with_capacity(thing_count + stuff_count);
        for i in 0..thing_count {
            classes.push(ClassDef {
                name: format!("thing_{i}"),
                is_thing: true,
            });
        }
        for i in 0..stuff_count {
            classes.push(ClassDef {
                name: format!("stuff_{i}"),
                is_thing: false,
            });
        }
        ClassTable { classes }
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn is_thing(&self, class_id: u32) -> Result<bool> {
        self.classes
            .get(class_id as usize)
            .map(|c| c.is_thing)
            .ok_or_else(|| Error::Config(format!("class id {class_id} absent from class table")))
    }

    pub fn name(&self, class_id: u32) -> Option<&str> {
        self.classes.get(class_id as usize).map(|c| c.name.as_str())
    }

    pub fn thing_ids(&self) -> Vec<u32> {
        (0..self.classes.len() as u32)
            .filter(|&i| self.classes[i as usize].is_thing)
            .collect()
    }

    pub fn stuff_ids(&self) -> Vec<u32> {
        (0..self.classes.len() as u32)
            .filter(|&i| !self.classes[i as usize].is_thing)
            .collect()
    }
}

/// Raw per-class match counts; the mergeable phase-one accumulator.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub iou_sum: f64,
}

impl ClassCounts {
    pub fn is_counted(&self) -> bool {
        self.tp + self.fp + self.fn_ > 0
    }
}

/// Phase-one accumulator over one or more images.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub per_class: BTreeMap<u32, ClassCounts>,
}

impl PqStats {
    pub fn merge(&mut self, other: &PqStats) {
        for (&class, counts) in &other.per_class {
            let slot = self.per_class.entry(class).or_default();
            slot.tp += counts.tp;
            slot.fp += counts.fp;
            slot.fn_ += counts.fn_;
            slot.iou_sum += counts.iou_sum;
        }
    }

    /// Derive per-class and aggregate qualities. Classes with no TP/FP/FN
    /// are excluded from every mean.
    pub fn finalize(&self, table: &ClassTable) -> Result<PqResult> {
        let mut per_class = BTreeMap::new();
        let mut sums = Aggregate::default();
        let mut thing_sums = Aggregate::default();
        let mut stuff_sums = Aggregate::default();
        for (&class, counts) in &self.per_class {
            let is_thing = table.is_thing(class)?;
            if !counts.is_counted() {
                continue;
            }
            let sq = if counts.tp > 0 {
                counts.iou_sum / counts.tp as f64
            } else {
                0.0
            };
            let denom = counts.tp as f64 + 0.5 * counts.fp as f64 + 0.5 * counts.fn_ as f64;
            let rq = if denom > 0.0 {
                counts.tp as f64 / denom
            } else {
                0.0
            };
            let pq = sq * rq;
            per_class.insert(
                class,
                ClassQuality {
                    pq,
                    sq,
                    rq,
                    counts: *counts,
                },
            );
            sums.push(pq, sq, rq);
            if is_thing {
                thing_sums.push(pq, sq, rq);
            } else {
                stuff_sums.push(pq, sq, rq);
            }
        }
        Ok(PqResult {
            pq: sums.mean_pq(),
            sq: sums.mean_sq(),
            rq: sums.mean_rq(),
            pq_things: thing_sums.mean_pq(),
            pq_stuff: stuff_sums.mean_pq(),
            counted_classes: sums.count,
            per_class,
        })
    }
}

#[derive(Default)]
struct Aggregate {
    pq: f64,
    sq: f64,
    rq: f64,
    count: usize,
}

impl Aggregate {
    fn push(&mut self, pq: f64, sq: f64, rq: f64) {
        self.pq += pq;
        self.sq += sq;
        self.rq += rq;
        self.count += 1;
    }

    fn mean_pq(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.pq / self.count as f64
        }
    }

    fn mean_sq(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.sq / self.count as f64
        }
    }

    fn mean_rq(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.rq / self.count as f64
        }
    }
}

/// Per-class quality: `pq = sq * rq` by construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassQuality {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    #[serde(flatten)]
    pub counts: ClassCounts,
}

/// Final report: per-class qualities plus unweighted means over counted
/// classes, overall and split by thing/stuff.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PqResult {
    pub pq: f64,
    pub sq: f64,
    pub rq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
    pub counted_classes: usize,
    pub per_class: BTreeMap<u32, ClassQuality>,
}

/// Phase one: match segments of one image pair and count TP/FP/FN per class.
pub fn pq_stats(pred: &PanopticMap, gt: &PanopticMap, table: &ClassTable) -> Result<PqStats> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(
            "pq_stats",
            format!("gt {}x{}", gt.height(), gt.width()),
            format!("pred {}x{}", pred.height(), pred.width()),
        ));
    }
    for seg in pred.segments().iter().chain(gt.segments()) {
        table.is_thing(seg.class_id)?;
    }

    // Pixel-pair intersection counts, with 0 on either side meaning void.
    let mut inter: HashMap<(u32, u32), u64> = HashMap::new();
    for p in 0..gt.ids().len() {
        *inter.entry((gt.ids()[p], pred.ids()[p])).or_insert(0) += 1;
    }

    let mut stats = PqStats::default();
    for seg in gt.segments().iter().chain(pred.segments()) {
        stats.per_class.entry(seg.class_id).or_default();
    }

    let mut matched_gt: BTreeMap<u32, u32> = BTreeMap::new();
    let mut matched_pred: BTreeMap<u32, u32> = BTreeMap::new();
    for gt_seg in gt.segments() {
        for pred_seg in pred.segments() {
            if gt_seg.class_id != pred_seg.class_id {
                continue;
            }
            let overlap = *inter.get(&(gt_seg.id, pred_seg.id)).unwrap_or(&0);
            if overlap == 0 {
                continue;
            }
            let void_overlap = *inter.get(&(0, pred_seg.id)).unwrap_or(&0);
            let union = gt_seg.area + pred_seg.area - overlap - void_overlap;
            let iou = overlap as f64 / union as f64;
            if iou > 0.5 {
                // IoU > 0.5 matches are unique; a duplicate means corrupt input.
                assert!(
                    !matched_gt.contains_key(&gt_seg.id) && !matched_pred.contains_key(&pred_seg.id),
                    "multiple IoU>0.5 matches for one segment"
                );
                matched_gt.insert(gt_seg.id, pred_seg.id);
                matched_pred.insert(pred_seg.id, gt_seg.id);
                let slot = stats.per_class.entry(gt_seg.class_id).or_default();
                slot.tp += 1;
                slot.iou_sum += iou;
            }
        }
    }

    for gt_seg in gt.segments() {
        if !matched_gt.contains_key(&gt_seg.id) {
            stats.per_class.entry(gt_seg.class_id).or_default().fn_ += 1;
        }
    }
    for pred_seg in pred.segments() {
        if matched_pred.contains_key(&pred_seg.id) {
            continue;
        }
        // Mostly-on-void predictions are exempt from FP counting.
        let void_overlap = *inter.get(&(0, pred_seg.id)).unwrap_or(&0);
        if void_overlap as f64 > 0.5 * pred_seg.area as f64 {
            continue;
        }
        stats.per_class.entry(pred_seg.class_id).or_default().fp += 1;
    }

    Ok(stats)
}

/// Match, count and finalize in one call for a single image pair.
pub fn panoptic_quality(
    pred: &PanopticMap,
    gt: &PanopticMap,
    table: &ClassTable,
) -> Result<PqResult> {
    pq_stats(pred, gt, table)?.finalize(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::{BitMask, ClassRaster, FusionConfig, InstancePrediction, PanopticMap, Segment};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn table() -> ClassTable {
        ClassTable::with_counts(2, 2)
    }

    /// Random valid panoptic map over an 8x8 grid: a couple of rectangles as
    /// things, remainder split into stuff classes by column bands, with an
    /// optional void border.
    fn random_map(r: &mut ChaCha8Rng, with_void: bool) -> PanopticMap {
        let (h, w) = (8usize, 8usize);
        let mut instances = Vec::new();
        for _ in 0..r.random_range(0..3) {
            let y0 = r.random_range(0..6);
            let x0 = r.random_range(0..6);
            let y1 = (y0 + r.random_range(2..4)).min(h);
            let x1 = (x0 + r.random_range(2..4)).min(w);
            let mut m = BitMask::empty(h, w);
            for y in y0..y1 {
                for x in x0..x1 {
                    m.set(y, x, true);
                }
            }
            instances.push(InstancePrediction::new(m, r.random_range(0..2), 1.0).unwrap());
        }
        let classes: Vec<u32> = (0..h * w).map(|p| 2 + ((p % w) / 4) as u32).collect();
        let semantic = ClassRaster::new(h, w, classes).unwrap();
        let cfg = FusionConfig {
            min_stuff_area: Some(1),
            score_thresh: 0.0,
            keep_frac: 0.0,
        };
        let fused = crate::fusion::fuse(&instances, &semantic, &cfg).unwrap();
        if !with_void {
            return fused;
        }
        // Punch a void hole: drop one pixel from the largest segment.
        let mut ids = fused.ids().to_vec();
        let mut segments = fused.segments().to_vec();
        if let Some(seg) = segments.iter_mut().max_by_key(|s| s.area) {
            if seg.area > 1 {
                let p = ids.iter().position(|&v| v == seg.id).unwrap();
                ids[p] = 0;
                seg.area -= 1;
            }
        }
        PanopticMap::new(8, 8, ids, segments).unwrap()
    }

    /// Brute-force reference: enumerate all segment pairs, compute IoU by
    /// pixel counting over explicit pixel sets, apply the formulas directly.
    fn pq_oracle(pred: &PanopticMap, gt: &PanopticMap, table: &ClassTable) -> PqResult {
        let pixels = |m: &PanopticMap, id: u32| -> Vec<usize> {
            (0..m.ids().len()).filter(|&p| m.ids()[p] == id).collect()
        };
        let mut per_class: BTreeMap<u32, ClassCounts> = BTreeMap::new();
        for seg in gt.segments().iter().chain(pred.segments()) {
            per_class.entry(seg.class_id).or_default();
        }
        let gt_void: Vec<usize> = (0..gt.ids().len()).filter(|&p| gt.ids()[p] == 0).collect();
        let mut gt_matched = Vec::new();
        let mut pred_matched = Vec::new();
        for g in gt.segments() {
            let gp = pixels(gt, g.id);
            for q in pred.segments() {
                if q.class_id != g.class_id {
                    continue;
                }
                let qp = pixels(pred, q.id);
                let inter = qp.iter().filter(|p| gp.contains(p)).count();
                if inter == 0 {
                    continue;
                }
                let void_inter = qp.iter().filter(|p| gt_void.contains(p)).count();
                let union = gp.len() + qp.len() - inter - void_inter;
                let iou = inter as f64 / union as f64;
                if iou > 0.5 {
                    gt_matched.push(g.id);
                    pred_matched.push(q.id);
                    let c = per_class.entry(g.class_id).or_default();
                    c.tp += 1;
                    c.iou_sum += iou;
                }
            }
        }
        for g in gt.segments() {
            if !gt_matched.contains(&g.id) {
                per_class.entry(g.class_id).or_default().fn_ += 1;
            }
        }
        for q in pred.segments() {
            if pred_matched.contains(&q.id) {
                continue;
            }
            let qp = pixels(pred, q.id);
            let void_inter = qp.iter().filter(|p| gt_void.contains(p)).count();
            if void_inter as f64 > 0.5 * qp.len() as f64 {
                continue;
            }
            per_class.entry(q.class_id).or_default().fp += 1;
        }
        PqStats { per_class }.finalize(table).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mut r = rng(1);
        let gt = random_map(&mut r, false);
        let res = panoptic_quality(&gt, &gt, &table()).unwrap();
        assert_eq!(res.pq, 1.0);
        assert_eq!(res.sq, 1.0);
        assert_eq!(res.rq, 1.0);
        for q in res.per_class.values() {
            assert_eq!(q.pq, 1.0);
        }
    }

    #[test]
    fn all_void_prediction_counts_fn() {
        let mut r = rng(2);
        let gt = random_map(&mut r, false);
        let empty = PanopticMap::new(8, 8, vec![0; 64], vec![]).unwrap();
        let res = panoptic_quality(&empty, &gt, &table()).unwrap();
        assert_eq!(res.pq, 0.0);
        for q in res.per_class.values() {
            assert_eq!(q.rq, 0.0);
            assert!(q.counts.fn_ >= 1);
        }
    }

    #[test]
    fn one_pixel_shift_matches_pixel_counting_oracle() {
        let mut r = rng(3);
        for trial in 0..100 {
            let gt = random_map(&mut r, trial % 3 == 0);
            // Shift the prediction raster one pixel right, keeping the table
            // areas consistent.
            let mut ids = vec![0u32; 64];
            for y in 0..8 {
                for x in 1..8 {
                    ids[y * 8 + x] = gt.ids()[y * 8 + x - 1];
                }
            }
            let mut segments: Vec<Segment> = Vec::new();
            for seg in gt.segments() {
                let area = ids.iter().filter(|&&v| v == seg.id).count() as u64;
                if area > 0 {
                    segments.push(Segment { area, ..seg.clone() });
                }
            }
            // Re-densify ids.
            let mut remap = BTreeMap::new();
            for (i, seg) in segments.iter_mut().enumerate() {
                remap.insert(seg.id, (i + 1) as u32);
                seg.id = (i + 1) as u32;
            }
            for v in ids.iter_mut() {
                if *v != 0 {
                    *v = remap[v];
                }
            }
            let pred = PanopticMap::new(8, 8, ids, segments).unwrap();
            let got = panoptic_quality(&pred, &gt, &table()).unwrap();
            let want = pq_oracle(&pred, &gt, &table());
            assert_eq!(got, want, "trial {trial}");
        }
    }

    #[test]
    fn pq_equals_sq_times_rq_exactly() {
        let mut r = rng(4);
        for _ in 0..20 {
            let gt = random_map(&mut r, false);
            let pred = random_map(&mut r, false);
            let res = panoptic_quality(&pred, &gt, &table()).unwrap();
            for q in res.per_class.values() {
                assert!((q.pq - q.sq * q.rq).abs() <= 1e-15);
            }
        }
    }

    #[test]
    fn segment_relabeling_is_invisible() {
        let mut r = rng(5);
        let gt = random_map(&mut r, false);
        let pred = random_map(&mut r, false);
        let base = panoptic_quality(&pred, &gt, &table()).unwrap();

        let relabel = |m: &PanopticMap| {
            let k = m.segments().len() as u32;
            let mut ids = m.ids().to_vec();
            for v in ids.iter_mut() {
                if *v != 0 {
                    *v = k + 1 - *v;
                }
            }
            let segments: Vec<Segment> = m
                .segments()
                .iter()
                .map(|s| Segment {
                    id: k + 1 - s.id,
                    ..s.clone()
                })
                .collect();
            PanopticMap::new(m.height(), m.width(), ids, segments).unwrap()
        };
        let res = panoptic_quality(&relabel(&pred), &relabel(&gt), &table()).unwrap();
        assert_eq!(base, res);
    }

    #[test]
    fn flipping_matched_pixels_to_void_never_raises_pq() {
        let mut r = rng(6);
        for _ in 0..10 {
            let gt = random_map(&mut r, false);
            let base = panoptic_quality(&gt, &gt, &table()).unwrap();
            // Flip one pixel of each segment of the prediction to void.
            for seg in gt.segments() {
                let mut ids = gt.ids().to_vec();
                let p = ids.iter().position(|&v| v == seg.id).unwrap();
                ids[p] = 0;
                let mut segments = gt.segments().to_vec();
                let mut dropped = None;
                for s in segments.iter_mut() {
                    if s.id == seg.id {
                        s.area -= 1;
                        if s.area == 0 {
                            dropped = Some(s.id);
                        }
                    }
                }
                if let Some(drop_id) = dropped {
                    segments.retain(|s| s.id != drop_id);
                    for s in segments.iter_mut() {
                        if s.id > drop_id {
                            s.id -= 1;
                        }
                    }
                    for v in ids.iter_mut() {
                        if *v > drop_id {
                            *v -= 1;
                        }
                    }
                }
                let pred = PanopticMap::new(8, 8, ids, segments).unwrap();
                let worse = panoptic_quality(&pred, &gt, &table()).unwrap();
                for (class, q) in &worse.per_class {
                    let before = base.per_class.get(class).map(|b| b.pq).unwrap_or(0.0);
                    assert!(q.pq <= before + 1e-12, "class {class} improved");
                }
            }
        }
    }

    #[test]
    fn two_phase_reduction_matches_per_image_sums() {
        let mut r = rng(7);
        let maps: Vec<(PanopticMap, PanopticMap)> =
            (0..20).map(|_| (random_map(&mut r, false), random_map(&mut r, false))).collect();
        let mut merged = PqStats::default();
        for (pred, gt) in &maps {
            merged.merge(&pq_stats(pred, gt, &table()).unwrap());
        }
        // External-script equivalent: sum raw counters directly.
        let mut manual: BTreeMap<u32, ClassCounts> = BTreeMap::new();
        for (pred, gt) in &maps {
            for (&class, c) in &pq_stats(pred, gt, &table()).unwrap().per_class {
                let slot = manual.entry(class).or_default();
                slot.tp += c.tp;
                slot.fp += c.fp;
                slot.fn_ += c.fn_;
                slot.iou_sum += c.iou_sum;
            }
        }
        assert_eq!(merged.per_class, manual);
        let fin = merged.finalize(&table()).unwrap();
        let fin2 = PqStats { per_class: manual }.finalize(&table()).unwrap();
        assert_eq!(fin, fin2);
    }

    #[test]
    fn unknown_class_id_is_rejected() {
        let ids = vec![1u32; 4];
        let seg = Segment {
            id: 1,
            class_id: 99,
            is_thing: true,
            area: 4,
        };
        let m = PanopticMap::new(2, 2, ids, vec![seg]).unwrap();
        assert!(panoptic_quality(&m, &m, &table()).is_err());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = PanopticMap::new(2, 2, vec![0; 4], vec![]).unwrap();
        let b = PanopticMap::new(2, 3, vec![0; 6], vec![]).unwrap();
        assert!(panoptic_quality(&a, &b, &table()).is_err());
    }

    #[test]
    fn mostly_void_predictions_are_not_false_positives() {
        // GT: all void except one 2x2 stuff block of class 2.
        let mut gt_ids = vec![0u32; 16];
        for p in [0usize, 1, 4, 5] {
            gt_ids[p] = 1;
        }
        let gt = PanopticMap::new(
            4,
            4,
            gt_ids,
            vec![Segment {
                id: 1,
                class_id: 2,
                is_thing: false,
                area: 4,
            }],
        )
        .unwrap();
        // Pred adds a thing segment fully inside gt void.
        let mut pred_ids = vec![0u32; 16];
        for p in [0usize, 1, 4, 5] {
            pred_ids[p] = 1;
        }
        for p in [10usize, 11, 14, 15] {
            pred_ids[p] = 2;
        }
        let pred = PanopticMap::new(
            4,
            4,
            pred_ids,
            vec![
                Segment {
                    id: 1,
                    class_id: 2,
                    is_thing: false,
                    area: 4,
                },
                Segment {
                    id: 2,
                    class_id: 0,
                    is_thing: true,
                    area: 4,
                },
            ],
        )
        .unwrap();
        let res = panoptic_quality(&pred, &gt, &table()).unwrap();
        assert_eq!(res.per_class.get(&0).map(|c| c.counts.fp), None);
        assert_eq!(res.per_class[&2].pq, 1.0);
    }
}
