//! Synthetic panoptic scenes with known ground truth.
//!
//! A scene lays stuff classes as horizontal bands, drops small geometric
//! things onto the band their class co-occurs with, and derives backbone
//! features as a noisy linear embedding of the per-pixel ground-truth class.
//! Proposals are pooled features over the ground-truth masks plus jittered
//! duplicates, standing in for a detector's RoI features.

mod train;

pub use train::{
    ablate, ablation_eval_seed, evaluate_toy, sgd_update, train, AblateRow, DivergenceInfo,
    SgdState, TrainConfig, TrainOutcome,
};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{BitMask, ClassRaster, PanopticMap, Segment};
use crate::graphs::{FeatureMap, Proposal, RegionSet, ScoreMap};
use crate::metrics::ClassTable;
use crate::tensor::Mat;

/// Scene generator settings. Global class ids are thing classes first
/// (0..thing_classes), then stuff classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    pub thing_classes: usize,
    pub stuff_classes: usize,
    pub feature_dim: usize,
    pub things_min: usize,
    pub things_max: usize,
    pub distractors_per_thing: usize,
    /// Thing class -> the stuff class it may appear on.
    pub co_occurrence: Vec<usize>,
    pub feature_noise: f64,
    pub score_scale: f64,
    pub score_noise: f64,
    pub proposal_noise: f64,
    /// Seed of the class-embedding matrix; independent of scene seeds so
    /// every scene of one run shares the same embedding.
    pub embed_seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            height: 12,
            width: 12,
            thing_classes: 3,
            stuff_classes: 3,
            feature_dim: 16,
            things_min: 1,
            things_max: 3,
            distractors_per_thing: 1,
            co_occurrence: vec![0, 1, 2],
            feature_noise: 0.1,
            score_scale: 4.0,
            score_noise: 0.3,
            proposal_noise: 0.05,
            embed_seed: 0x7777,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 4 || self.width < 4 {
            return Err(Error::Config(format!(
                "scene must be at least 4x4, got {}x{}",
                self.height, self.width
            )));
        }
        if self.thing_classes == 0 || self.stuff_classes == 0 {
            return Err(Error::Config("need at least one thing and one stuff class".into()));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if self.height / self.stuff_classes < 3 {
            return Err(Error::Config(format!(
                "{} rows cannot hold {} stuff bands of at least 3 rows",
                self.height, self.stuff_classes
            )));
        }
        if self.things_min > self.things_max {
            return Err(Error::Config(format!(
                "things_min {} exceeds things_max {}",
                self.things_min, self.things_max
            )));
        }
        if self.co_occurrence.len() != self.thing_classes {
            return Err(Error::Config(format!(
                "co_occurrence has {} entries for {} thing classes",
                self.co_occurrence.len(),
                self.thing_classes
            )));
        }
        for (t, &s) in self.co_occurrence.iter().enumerate() {
            if s >= self.stuff_classes {
                return Err(Error::Config(format!(
                    "thing class {t} maps to stuff class {s}, only {} exist",
                    self.stuff_classes
                )));
            }
        }
        for (name, v) in [
            ("feature_noise", self.feature_noise),
            ("score_noise", self.score_noise),
            ("proposal_noise", self.proposal_noise),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if !(self.score_scale > 0.0) || !self.score_scale.is_finite() {
            return Err(Error::Config(format!(
                "score_scale must be > 0, got {}",
                self.score_scale
            )));
        }
        Ok(())
    }

    pub fn total_classes(&self) -> usize {
        self.thing_classes + self.stuff_classes
    }

    pub fn class_table(&self) -> ClassTable {
        ClassTable::with_counts(self.thing_classes, self.stuff_classes)
    }

    /// Global class id of a local stuff class.
    pub fn stuff_global(&self, local: usize) -> u32 {
        (self.thing_classes + local) as u32
    }
}

/// One ground-truth thing: its mask and local thing class.
#[derive(Debug, Clone)]
pub struct GtThing {
    pub mask: BitMask,
    pub thing_class: usize,
}

/// A generated scene with every intermediate needed by training, evaluation
/// and the file-based CLI commands.
#[derive(Debug, Clone)]
pub struct ToyScene {
    pub height: usize,
    pub width: usize,
    pub class_table: ClassTable,
    /// Per-pixel local stuff class (defined under things too).
    pub stuff_gt: Vec<usize>,
    pub things: Vec<GtThing>,
    pub regions: RegionSet,
    /// Ground-truth local thing class per proposal, aligned with `regions`.
    pub proposal_labels: Vec<usize>,
    pub features: FeatureMap,
    pub scores: ScoreMap,
    pub gt_panoptic: PanopticMap,
}

impl ToyScene {
    /// Semantic ground truth as global stuff class ids.
    pub fn semantic_gt(&self) -> ClassRaster {
        let classes: Vec<u32> = self
            .stuff_gt
            .iter()
            .map(|&s| (self.class_table.thing_ids().len() + s) as u32)
            .collect();
        ClassRaster::new(self.height, self.width, classes).expect("layout")
    }
}

/// The class-embedding matrix (feature_dim × total classes). Columns are
/// orthonormalized when the feature dimension allows it, which makes the
/// noiseless scene exactly linearly separable.
pub fn class_embedding_matrix(cfg: &GenConfig) -> Mat {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.embed_seed);
    let n = cfg.feature_dim;
    let c = cfg.total_classes();
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(c);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    for _ in 0..c {
        let mut v: Vec<f64> = (0..n).map(|_| normal.sample(&mut rng)).collect();
        if n >= c {
            // Gram-Schmidt against previous columns.
            for prev in &cols {
                let dot: f64 = v.iter().zip(prev).map(|(a, b)| a * b).sum();
                for (vi, pi) in v.iter_mut().zip(prev) {
                    *vi -= dot * pi;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            for vi in v.iter_mut() {
                *vi /= norm;
            }
        }
        cols.push(v);
    }
    let mut m = Mat::zeros(n, c);
    for (j, col) in cols.iter().enumerate() {
        for (i, &v) in col.iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

/// Stuff band boundaries: `stuff_classes + 1` row indices from 0 to height,
/// interior boundaries jittered by ±1 while every band keeps >= 2 rows.
fn band_boundaries(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let c = cfg.stuff_classes;
    let mut bounds: Vec<usize> = (0..=c).map(|i| i * cfg.height / c).collect();
    for i in 1..c {
        let jitter = rng.random_range(-1i32..=1) as isize;
        let proposed = (bounds[i] as isize + jitter).max(0) as usize;
        if proposed > bounds[i - 1] + 1 && proposed + 2 <= bounds[i + 1] {
            bounds[i] = proposed;
        }
    }
    bounds
}

fn disc_mask(h: usize, w: usize, cy: usize, cx: usize) -> Vec<(usize, usize)> {
    // 3x3 diamond.
    let mut px = Vec::new();
    for (dy, dx) in [(0isize, 0isize), (-1, 0), (1, 0), (0, -1), (0, 1)] {
        let y = cy as isize + dy;
        let x = cx as isize + dx;
        if y >= 0 && x >= 0 && (y as usize) < h && (x as usize) < w {
            px.push((y as usize, x as usize));
        }
    }
    px
}

/// 3×3 box blur with in-bounds averaging.
fn box_blur(data: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut sum = 0.0;
            let mut count = 0.0;
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let ny = y as isize + dy;
                    let nx = x as isize + dx;
                    if ny >= 0 && nx >= 0 && (ny as usize) < h && (nx as usize) < w {
                        sum += data[ny as usize * w + nx as usize];
                        count += 1.0;
                    }
                }
            }
            out[y * w + x] = sum / count;
        }
    }
    out
}

/// Generate one scene; bit-identical for a fixed `(cfg, seed)` pair.
pub fn generate_scene(cfg: &GenConfig, seed: u64) -> Result<ToyScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (cfg.height, cfg.width);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // Stuff bands.
    let bounds = band_boundaries(cfg, &mut rng);
    let mut stuff_gt = vec![0usize; h * w];
    for (band, pair) in bounds.windows(2).enumerate() {
        for y in pair[0]..pair[1] {
            for x in 0..w {
                stuff_gt[y * w + x] = band;
            }
        }
    }

    // Things: geometric shapes fully inside their co-occurring band,
    // non-overlapping with each other.
    let mut occupied = BitMask::empty(h, w);
    let mut things: Vec<GtThing> = Vec::new();
    let count = rng.random_range(cfg.things_min..=cfg.things_max);
    for _ in 0..count {
        let thing_class = rng.random_range(0..cfg.thing_classes);
        let band = cfg.co_occurrence[thing_class];
        let (row_lo, row_hi) = (bounds[band], bounds[band + 1]);
        let band_height = row_hi - row_lo;
        let mut placed = false;
        for _attempt in 0..50 {
            let use_disc = band_height >= 3 && w >= 3 && rng.random_range(0..2) == 1;
            let pixels: Vec<(usize, usize)> = if use_disc {
                let cy = rng.random_range(row_lo + 1..row_hi - 1);
                let cx = rng.random_range(1..w - 1);
                disc_mask(h, w, cy, cx)
            } else {
                let sh = rng.random_range(2..=3.min(band_height));
                let sw = rng.random_range(2..=3.min(w));
                let y0 = rng.random_range(row_lo..=row_hi - sh);
                let x0 = rng.random_range(0..=w - sw);
                (y0..y0 + sh)
                    .flat_map(|y| (x0..x0 + sw).map(move |x| (y, x)))
                    .collect()
            };
            if pixels.iter().any(|&(y, x)| occupied.get(y, x)) {
                continue;
            }
            let mut mask = BitMask::empty(h, w);
            for &(y, x) in &pixels {
                mask.set(y, x, true);
                occupied.set(y, x, true);
            }
            things.push(GtThing { mask, thing_class });
            placed = true;
            break;
        }
        if !placed {
            log::debug!("scene {seed}: no room for another thing, continuing with {} placed", things.len());
        }
    }

    // Per-pixel global class: thing pixels carry the thing class.
    let mut pixel_class: Vec<usize> = stuff_gt.iter().map(|&s| cfg.thing_classes + s).collect();
    for thing in &things {
        for y in 0..h {
            for x in 0..w {
                if thing.mask.get(y, x) {
                    pixel_class[y * w + x] = thing.thing_class;
                }
            }
        }
    }

    // Features: embedding of the pixel class plus isotropic noise.
    let embedding = class_embedding_matrix(cfg);
    let n = cfg.feature_dim;
    let mut f_data = vec![0.0; n * h * w];
    for p in 0..h * w {
        for ch in 0..n {
            let noise = if cfg.feature_noise > 0.0 {
                cfg.feature_noise * normal.sample(&mut rng)
            } else {
                0.0
            };
            f_data[ch * h * w + p] = embedding.get(ch, pixel_class[p]) + noise;
        }
    }
    let features = FeatureMap::new(n, h, w, f_data)?;

    // Coarse scores: blurred one-hot stuff ground truth plus noise.
    let mut s_data = vec![0.0; cfg.stuff_classes * h * w];
    for c in 0..cfg.stuff_classes {
        let plane: Vec<f64> = (0..h * w)
            .map(|p| if stuff_gt[p] == c { cfg.score_scale } else { 0.0 })
            .collect();
        let blurred = box_blur(&plane, h, w);
        for p in 0..h * w {
            let noise = if cfg.score_noise > 0.0 {
                cfg.score_noise * normal.sample(&mut rng)
            } else {
                0.0
            };
            s_data[c * h * w + p] = blurred[p] + noise;
        }
    }
    let scores = ScoreMap::new(cfg.stuff_classes, h, w, s_data)?;

    // Proposals: ground-truth masks plus jittered duplicates.
    let pooled_mean = |mask: &BitMask| -> Vec<f64> {
        let mut acc = vec![0.0; n];
        let mut count = 0.0;
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) {
                    count += 1.0;
                    for ch in 0..n {
                        acc[ch] += features.get(ch, y, x);
                    }
                }
            }
        }
        for a in acc.iter_mut() {
            *a /= count;
        }
        acc
    };
    let mut proposals: Vec<(Proposal, usize)> = Vec::new();
    for thing in &things {
        let mut feature = pooled_mean(&thing.mask);
        for v in feature.iter_mut() {
            if cfg.proposal_noise > 0.0 {
                *v += cfg.proposal_noise * normal.sample(&mut rng);
            }
        }
        proposals.push((
            Proposal {
                feature,
                score: rng.random_range(0.75..1.0),
                class_id: Some(thing.thing_class as u32),
                mask: Some(thing.mask.clone()),
            },
            thing.thing_class,
        ));
        for _ in 0..cfg.distractors_per_thing {
            let dy = rng.random_range(-1i32..=1) as isize;
            let dx = rng.random_range(-1i32..=1) as isize;
            let shifted = thing.mask.shifted(dy, dx);
            if shifted.count() == 0 {
                continue;
            }
            let mut feature = pooled_mean(&shifted);
            for v in feature.iter_mut() {
                if cfg.proposal_noise > 0.0 {
                    *v += cfg.proposal_noise * normal.sample(&mut rng);
                }
            }
            proposals.push((
                Proposal {
                    feature,
                    score: rng.random_range(0.3..0.85),
                    class_id: Some(thing.thing_class as u32),
                    mask: Some(shifted),
                },
                thing.thing_class,
            ));
        }
    }
    proposals.shuffle(&mut rng);
    let proposal_labels: Vec<usize> = proposals.iter().map(|(_, l)| *l).collect();
    let regions = RegionSet {
        proposals: proposals.into_iter().map(|(p, _)| p).collect(),
    };

    // Ground-truth panoptic map: things in placement order, then one stuff
    // segment per class over the remaining pixels.
    let mut ids = vec![0u32; h * w];
    let mut segments = Vec::new();
    let mut next_id = 1u32;
    for thing in &things {
        let mut area = 0u64;
        for p in 0..h * w {
            if thing.mask.bits()[p] {
                ids[p] = next_id;
                area += 1;
            }
        }
        segments.push(Segment {
            id: next_id,
            class_id: thing.thing_class as u32,
            is_thing: true,
            area,
        });
        next_id += 1;
    }
    for c in 0..cfg.stuff_classes {
        let pixels: Vec<usize> = (0..h * w)
            .filter(|&p| ids[p] == 0 && stuff_gt[p] == c)
            .collect();
        if pixels.is_empty() {
            continue;
        }
        for &p in &pixels {
            ids[p] = next_id;
        }
        segments.push(Segment {
            id: next_id,
            class_id: cfg.stuff_global(c),
            is_thing: false,
            area: pixels.len() as u64,
        });
        next_id += 1;
    }
    let gt_panoptic = PanopticMap::new(h, w, ids, segments)?;

    Ok(ToyScene {
        height: h,
        width: w,
        class_table: cfg.class_table(),
        stuff_gt,
        things,
        regions,
        proposal_labels,
        features,
        scores,
        gt_panoptic,
    })
}
