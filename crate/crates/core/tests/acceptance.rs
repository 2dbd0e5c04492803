//! Acceptance suite: every criterion at its stated tolerance, one pass/fail
//! line per criterion. Oracles here are independent re-implementations,
//! never calls back into the code path under test.

use std::collections::BTreeMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use bgr_core::fusion::{
    fuse, BitMask, ClassRaster, FusionConfig, InstancePrediction, PanopticMap, Segment,
};
use bgr_core::graphs::{extract_class_centers, FeatureMap, ScoreMap};
use bgr_core::metrics::{panoptic_quality, ClassTable};
use bgr_core::pipeline::{PipelineConfig, PipelineMode, PipelineParams};
use bgr_core::projection::{classify_regions, segment_pixels};
use bgr_core::reasoning::{
    attention_adjacency, direction_mask, run_reasoning, AttentionHead, DirectionMode, JointGraph,
    ReasoningLayerParams, ReasoningStack,
};
use bgr_core::tensor::{ops, Mat};
use bgr_core::toytask::{ablate, generate_scene, train, GenConfig, TrainConfig};

fn pass(n: usize, what: &str) {
    println!("[PASS] criterion {n}: {what}");
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

// ---------------------------------------------------------------------------
// 1. Gradient suite
// ---------------------------------------------------------------------------

#[test]
fn criterion_1_gradient_suite() {
    let start = Instant::now();
    let reports = bgr_core::gradsuite::run_suite(None, 1e-5, 1e-4, 20260810, false).unwrap();
    let elapsed = start.elapsed();
    assert!(
        reports.iter().any(|r| r.name == "pipeline_end_to_end"),
        "suite must include the end-to-end pipeline"
    );
    for r in &reports {
        assert!(
            r.pass,
            "op {} failed gradcheck: max_rel_err {}",
            r.name, r.max_rel_err
        );
    }
    assert!(
        elapsed.as_secs() < 60,
        "gradient suite took {elapsed:?}, budget is 60 s"
    );
    pass(
        1,
        &format!(
            "{} ops + end-to-end pipeline pass finite differences (eps=1e-5, tol=1e-4) in {elapsed:.2?}",
            reports.len()
        ),
    );
}

// ---------------------------------------------------------------------------
// 2. Class-center extraction vs weighted-sum oracle
// ---------------------------------------------------------------------------

#[test]
fn criterion_2_class_center_oracle() {
    let mut r = rng(2);
    for trial in 0..50 {
        let (n, h, w, c) = (
            r.random_range(2..6),
            r.random_range(3..8),
            r.random_range(3..8),
            r.random_range(1..5),
        );
        let f_data: Vec<f64> = (0..n * h * w).map(|_| r.random_range(-3.0..3.0)).collect();
        let s_data: Vec<f64> = (0..c * h * w).map(|_| r.random_range(-4.0..4.0)).collect();
        let f = FeatureMap::new(n, h, w, f_data).unwrap();
        let s = ScoreMap::new(c, h, w, s_data).unwrap();
        let got = extract_class_centers(&f, &s).unwrap().features;

        // Oracle: per class, explicit softmax weights over all pixels, then
        // an explicit weighted sum of pixel features.
        let hw = h * w;
        for class in 0..c {
            let logits: Vec<f64> = (0..hw).map(|p| s.get(class, p / w, p % w)).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for ch in 0..n {
                let mut acc = 0.0;
                for p in 0..hw {
                    acc += exps[p] / z * f.get(ch, p / w, p % w);
                }
                let diff = (got.get(class, ch) - acc).abs();
                assert!(diff < 1e-9, "trial {trial} class {class} ch {ch}: {diff}");
            }
        }

        // Convex-combination bound per channel.
        for ch in 0..n {
            let vals: Vec<f64> = (0..hw).map(|p| f.get(ch, p / w, p % w)).collect();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min) - 1e-12;
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 1e-12;
            for class in 0..c {
                let v = got.get(class, ch);
                assert!(v >= lo && v <= hi, "trial {trial}: {v} outside [{lo},{hi}]");
            }
        }
    }
    pass(2, "class centers match the weighted-sum oracle within 1e-9 on 50 instances, convex bound holds");
}

// ---------------------------------------------------------------------------
// 3. Block equivalence of the reasoning layer
// ---------------------------------------------------------------------------

fn random_row_stochastic(n: usize, r: &mut ChaCha8Rng) -> Mat {
    let mut m = Mat::zeros(n, n);
    for i in 0..n {
        let mut row: Vec<f64> = (0..n).map(|_| r.random_range(0.01..1.0)).collect();
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
        for (j, v) in row.into_iter().enumerate() {
            m.set(i, j, v);
        }
    }
    m
}

#[test]
fn criterion_3_block_equivalence() {
    let mut r = rng(3);
    for trial in 0..50 {
        let n_th = r.random_range(0..5);
        let n_st = r.random_range(1..5);
        let n = n_th + n_st;
        let d = r.random_range(2..5);
        let d0 = r.random_range(1..4);
        let features = Mat::random_uniform(n, d, -2.0, 2.0, &mut r);
        let adjacency = random_row_stochastic(n, &mut r);
        let g = JointGraph::new(features.clone(), n_th, adjacency.clone()).unwrap();
        let p = ReasoningLayerParams::random_init(d, d0, 2, &mut r);
        let got = bgr_core::reasoning::reasoning_layer(&g, &p).unwrap();

        // Blockwise-expansion oracle with explicit index loops.
        let mut mixed = Mat::zeros(n, d0);
        for i in 0..n {
            for j in 0..d0 {
                let mut acc = 0.0;
                for k in 0..n {
                    let w = if k < n_th { &p.w_th } else { &p.w_st };
                    for t in 0..d {
                        acc += adjacency.get(i, k) * features.get(k, t) * w.get(t, j);
                    }
                }
                mixed.set(i, j, acc.max(0.0));
            }
        }
        for i in 0..n {
            for j in 0..d {
                assert!((got.get(i, j) - features.get(i, j)).abs() == 0.0, "trial {trial}");
            }
            for j in 0..d0 {
                let diff = (got.get(i, d + j) - mixed.get(i, j)).abs();
                assert!(diff < 1e-9, "trial {trial} ({i},{j}): {diff}");
            }
        }

        // Shared weights collapse to the monolithic product exactly.
        let shared = ReasoningLayerParams {
            w_th: p.w_th.clone(),
            w_st: p.w_th.clone(),
            heads: vec![],
        };
        let blockwise = bgr_core::reasoning::reasoning_layer(&g, &shared).unwrap();
        let xw = ops::matmul(&features, &p.w_th).unwrap();
        let mono = ops::concat_cols(
            &features,
            &ops::relu(&ops::matmul(&adjacency, &xw).unwrap()),
        )
        .unwrap();
        assert_eq!(blockwise, mono, "trial {trial}: monolithic collapse must be exact");
    }
    pass(3, "reasoning layer matches the blockwise-expansion oracle within 1e-9 on 50 instances; shared-weight collapse is exact");
}

// ---------------------------------------------------------------------------
// 4. Attention contract
// ---------------------------------------------------------------------------

#[test]
fn criterion_4_attention_contract() {
    let mut r = rng(4);
    // Row-stochasticity across sizes 1..=20 with 3 heads, every mode.
    for n in 1..=20usize {
        let n_th = r.random_range(0..n);
        let n_st = n - n_th;
        let d = r.random_range(2..5);
        let x = Mat::random_uniform(n, d, -3.0, 3.0, &mut r);
        let heads: Vec<AttentionHead> = (0..3)
            .map(|_| AttentionHead {
                w_pair: Mat::random_uniform(1, 2 * d, -1.0, 1.0, &mut r),
            })
            .collect();
        for mode in [
            DirectionMode::Bidirectional,
            DirectionMode::ThingToStuff,
            DirectionMode::StuffToThing,
            DirectionMode::Disconnected,
        ] {
            let mask = direction_mask(mode, n_th, n_st);
            let adj = attention_adjacency(&x, &heads, &mask, 0.2).unwrap();
            for i in 0..n {
                let sum: f64 = adj.row(i).iter().sum();
                assert!(
                    (sum - 1.0).abs() < 1e-10,
                    "n={n} mode={} row {i} sums to {sum}",
                    mode.name()
                );
            }
        }
    }

    // Literal independence under unidirectional masking, over T=2 layers.
    let x_th = Mat::random_uniform(3, 4, -1.0, 1.0, &mut r);
    let x_st = Mat::random_uniform(2, 4, -1.0, 1.0, &mut r);
    let perturbed_st = Mat::random_uniform(2, 4, -100.0, 100.0, &mut r);
    let perturbed_th = Mat::random_uniform(3, 4, -100.0, 100.0, &mut r);
    let t2s = ReasoningStack::random_init(4, 3, 2, 3, DirectionMode::ThingToStuff, 0.2, &mut r).unwrap();
    let base = run_reasoning(&x_th, &x_st, &t2s, None).unwrap();
    let moved = run_reasoning(&x_th, &perturbed_st, &t2s, None).unwrap();
    assert_eq!(base.x_th, moved.x_th, "thing-to-stuff: things must ignore stuff");
    let s2t = ReasoningStack::random_init(4, 3, 2, 3, DirectionMode::StuffToThing, 0.2, &mut r).unwrap();
    let base = run_reasoning(&x_th, &x_st, &s2t, None).unwrap();
    let moved = run_reasoning(&perturbed_th, &x_st, &s2t, None).unwrap();
    assert_eq!(base.x_st, moved.x_st, "stuff-to-thing: stuff must ignore things");

    pass(4, "attention rows sum to 1 within 1e-10 for n in 1..=20 with 3 heads; unidirectional masks give bit-exact independence");
}

// ---------------------------------------------------------------------------
// 5. PQ vs pixel-counting oracle
// ---------------------------------------------------------------------------

fn random_panoptic_8x8(r: &mut ChaCha8Rng, with_void: bool) -> PanopticMap {
    let (h, w) = (8usize, 8usize);
    let mut ids = vec![0u32; h * w];
    let mut segments: Vec<Segment> = Vec::new();
    let mut next = 1u32;
    // Rectangular things.
    for _ in 0..r.random_range(1..3) {
        let y0 = r.random_range(0..6);
        let x0 = r.random_range(0..6);
        let y1 = (y0 + r.random_range(2..4)).min(h);
        let x1 = (x0 + r.random_range(2..4)).min(w);
        let mut area = 0u64;
        for y in y0..y1 {
            for x in x0..x1 {
                if ids[y * w + x] == 0 {
                    ids[y * w + x] = next;
                    area += 1;
                }
            }
        }
        if area == 0 {
            continue;
        }
        segments.push(Segment {
            id: next,
            class_id: r.random_range(0..2),
            is_thing: true,
            area,
        });
        next += 1;
    }
    // Stuff: one region per class over column halves.
    for (class, range) in [(2u32, 0..4usize), (3u32, 4..8usize)] {
        let pixels: Vec<usize> = (0..h * w)
            .filter(|&p| ids[p] == 0 && range.contains(&(p % w)))
            .collect();
        if pixels.is_empty() {
            continue;
        }
        for &p in &pixels {
            ids[p] = next;
        }
        segments.push(Segment {
            id: next,
            class_id: class,
            is_thing: false,
            area: pixels.len() as u64,
        });
        next += 1;
    }
    if with_void {
        // Punch void pixels out of the largest segment.
        if let Some(seg) = segments.iter_mut().max_by_key(|s| s.area) {
            let victims: Vec<usize> = (0..h * w).filter(|&p| ids[p] == seg.id).take(2).collect();
            if seg.area > victims.len() as u64 {
                for &p in &victims {
                    ids[p] = 0;
                }
                seg.area -= victims.len() as u64;
            }
        }
    }
    PanopticMap::new(h, w, ids, segments).unwrap()
}

/// Brute force: enumerate all segment pairs, compute IoU by pixel counting,
/// apply the formulas directly.
fn pq_oracle(pred: &PanopticMap, gt: &PanopticMap, table: &ClassTable) -> (BTreeMap<u32, [f64; 3]>, f64) {
    let pixels = |m: &PanopticMap, id: u32| -> Vec<usize> {
        (0..m.ids().len()).filter(|&p| m.ids()[p] == id).collect()
    };
    #[derive(Default, Clone, Copy)]
    struct C {
        tp: u64,
        fp: u64,
        fn_: u64,
        iou: f64,
    }
    let mut counts: BTreeMap<u32, C> = BTreeMap::new();
    for seg in gt.segments().iter().chain(pred.segments()) {
        counts.entry(seg.class_id).or_default();
    }
    let gt_void: Vec<usize> = (0..gt.ids().len()).filter(|&p| gt.ids()[p] == 0).collect();
    let mut matched_gt = Vec::new();
    let mut matched_pred = Vec::new();
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
                matched_gt.push(g.id);
                matched_pred.push(q.id);
                let c = counts.entry(g.class_id).or_default();
                c.tp += 1;
                c.iou += iou;
            }
        }
    }
    for g in gt.segments() {
        if !matched_gt.contains(&g.id) {
            counts.entry(g.class_id).or_default().fn_ += 1;
        }
    }
    for q in pred.segments() {
        if matched_pred.contains(&q.id) {
            continue;
        }
        let qp = pixels(pred, q.id);
        let void_inter = qp.iter().filter(|p| gt_void.contains(p)).count();
        if void_inter as f64 > 0.5 * qp.len() as f64 {
            continue;
        }
        counts.entry(q.class_id).or_default().fp += 1;
    }
    let mut per_class = BTreeMap::new();
    let mut pq_sum = 0.0;
    let mut counted = 0usize;
    for (&class, c) in &counts {
        table.is_thing(class).unwrap();
        if c.tp + c.fp + c.fn_ == 0 {
            continue;
        }
        let sq = if c.tp > 0 { c.iou / c.tp as f64 } else { 0.0 };
        let denom = c.tp as f64 + 0.5 * c.fp as f64 + 0.5 * c.fn_ as f64;
        let rq = if denom > 0.0 { c.tp as f64 / denom } else { 0.0 };
        per_class.insert(class, [sq * rq, sq, rq]);
        pq_sum += sq * rq;
        counted += 1;
    }
    (per_class, if counted == 0 { 0.0 } else { pq_sum / counted as f64 })
}

#[test]
fn criterion_5_pq_oracle() {
    let table = ClassTable::with_counts(2, 2);
    let mut r = rng(5);
    for trial in 0..100 {
        let gt = random_panoptic_8x8(&mut r, trial % 4 == 0);
        let pred = random_panoptic_8x8(&mut r, trial % 5 == 0);
        let got = panoptic_quality(&pred, &gt, &table).unwrap();
        let (want_classes, want_pq) = pq_oracle(&pred, &gt, &table);
        assert_eq!(
            got.per_class.keys().copied().collect::<Vec<_>>(),
            want_classes.keys().copied().collect::<Vec<_>>(),
            "trial {trial}: counted class sets differ"
        );
        for (class, [pq, sq, rq]) in &want_classes {
            let q = &got.per_class[class];
            assert_eq!(q.pq, *pq, "trial {trial} class {class} pq");
            assert_eq!(q.sq, *sq, "trial {trial} class {class} sq");
            assert_eq!(q.rq, *rq, "trial {trial} class {class} rq");
            assert!((q.pq - q.sq * q.rq).abs() <= 1e-15);
        }
        assert_eq!(got.pq, want_pq, "trial {trial} aggregate pq");
    }
    // Perfect prediction scores exactly 1.
    let gt = random_panoptic_8x8(&mut r, false);
    let res = panoptic_quality(&gt, &gt, &table).unwrap();
    assert_eq!(res.pq, 1.0);
    assert_eq!(res.sq, 1.0);
    assert_eq!(res.rq, 1.0);
    pass(5, "PQ matches the pixel-counting oracle exactly on 100 scenes; PQ=SQ*RQ to 1e-15; perfect prediction = 1");
}

// ---------------------------------------------------------------------------
// 6. Fusion vs greedy-simulation oracle
// ---------------------------------------------------------------------------

fn random_instances_10x10(r: &mut ChaCha8Rng) -> Vec<InstancePrediction> {
    (0..r.random_range(2..6))
        .map(|_| {
            let y0 = r.random_range(0..8);
            let x0 = r.random_range(0..8);
            let y1 = (y0 + r.random_range(2..5)).min(10);
            let x1 = (x0 + r.random_range(2..5)).min(10);
            let mut m = BitMask::empty(10, 10);
            for y in y0..y1 {
                for x in x0..x1 {
                    m.set(y, x, true);
                }
            }
            InstancePrediction::new(m, r.random_range(0..3), (r.random_range(0..=20) as f64) / 20.0)
                .unwrap()
        })
        .collect()
}

#[test]
fn criterion_6_fusion_oracle() {
    let mut r = rng(6);
    for trial in 0..100 {
        let instances = random_instances_10x10(&mut r);
        let classes: Vec<u32> = (0..100).map(|_| 10 + r.random_range(0..3)).collect();
        let semantic = ClassRaster::new(10, 10, classes).unwrap();
        let cfg = FusionConfig {
            score_thresh: 0.5,
            keep_frac: 0.5,
            min_stuff_area: Some(2),
        };
        let got = fuse(&instances, &semantic, &cfg).unwrap();

        // Greedy pixel-by-pixel simulation.
        let order = {
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
            idx
        };
        let mut ids = vec![0u32; 100];
        let mut segs: Vec<Segment> = Vec::new();
        let mut next = 1u32;
        for &i in &order {
            let mut claimed = Vec::new();
            let mut total = 0u64;
            for p in 0..100 {
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
        for class in 10u32..13 {
            let pixels: Vec<usize> = (0..100)
                .filter(|&p| ids[p] == 0 && semantic.as_slice()[p] == class)
                .collect();
            if pixels.len() < 2 {
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
        assert_eq!(got.ids(), &ids[..], "trial {trial} raster");
        assert_eq!(got.segments(), &segs[..], "trial {trial} segment table");

        // Permutation invariance.
        let mut shuffled = instances.clone();
        shuffled.reverse();
        if shuffled.len() >= 3 {
            shuffled.swap(0, 2);
        }
        let permuted = fuse(&shuffled, &semantic, &cfg).unwrap();
        assert_eq!(got, permuted, "trial {trial}: permutation changed fusion");
    }
    pass(6, "fusion equals the greedy-simulation oracle on 100 instance sets; permutation invariant");
}

// ---------------------------------------------------------------------------
// 7. Toy training halves the loss
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_toy_training() {
    let gen = GenConfig::default();
    let pipe = PipelineConfig::default();
    let cfg = TrainConfig::default();
    assert_eq!(pipe.n_dim, 16);
    assert_eq!(gen.height, 12);
    assert_eq!(cfg.iterations, 200);
    assert_eq!(cfg.lr, 0.02);
    assert_eq!(cfg.momentum, 0.9);
    assert_eq!(cfg.weight_decay, 5e-4);

    let start = Instant::now();
    let out = train(&cfg, &pipe, &gen, None).unwrap();
    let elapsed = start.elapsed();
    assert!(out.divergence.is_none(), "training must not diverge");
    assert!(
        out.final_loss <= 0.5 * out.first_loss,
        "loss {} -> {} misses the 50% reduction",
        out.first_loss,
        out.final_loss
    );
    assert!(
        elapsed.as_secs() < 300,
        "training took {elapsed:?}, budget is 5 minutes"
    );

    // Deterministic per seed.
    let again = train(&cfg, &pipe, &gen, None).unwrap();
    assert_eq!(out.log_lines, again.log_lines);
    for ((_, a), (_, b)) in out.params.named().iter().zip(again.params.named().iter()) {
        assert_eq!(a, b, "checkpoints differ between identical runs");
    }
    pass(
        7,
        &format!(
            "default toy training reduced loss {:.4} -> {:.4} ({:.1}%) deterministically in {elapsed:.2?}",
            out.first_loss,
            out.final_loss,
            100.0 * out.final_loss / out.first_loss
        ),
    );
}

// ---------------------------------------------------------------------------
// 8. Ablation shape and baseline bit-exactness
// ---------------------------------------------------------------------------

#[test]
fn criterion_8_ablation_shape() {
    // Library-level ablation table; the CLI-level counterpart lives in the
    // bgr-cli acceptance suite.
    let gen = GenConfig {
        height: 9,
        width: 9,
        feature_dim: 8,
        ..GenConfig::default()
    };
    let pipe = PipelineConfig {
        n_dim: 8,
        d0: 4,
        d1: 4,
        d2: 4,
        ..PipelineConfig::default()
    };
    let cfg = TrainConfig {
        iterations: 12,
        lr_drops: [8, 10],
        batch_size: 1,
        ..TrainConfig::default()
    };
    // Embedding table from the generator's class embeddings.
    let table = gen.class_table();
    let embedding = bgr_core::toytask::class_embedding_matrix(&gen);
    let mut entries = BTreeMap::new();
    for (id, class) in table.classes.iter().enumerate() {
        entries.insert(
            class.name.clone(),
            (0..gen.feature_dim).map(|ch| embedding.get(ch, id)).collect(),
        );
    }
    let emb_file = bgr_core::io::EmbeddingFile {
        dim: gen.feature_dim,
        embeddings: entries,
    };
    let rows = ablate(&cfg, &pipe, &gen, Some(&emb_file), 4, 1).unwrap();
    assert_eq!(rows.len(), 7, "exactly one row per mode");
    let names: Vec<&str> = rows.iter().map(|r| r.mode.as_str()).collect();
    assert_eq!(
        names,
        vec![
            "bidirectional",
            "thing-to-stuff",
            "stuff-to-thing",
            "disconnected",
            "thing-only",
            "stuff-only",
            "cosine"
        ]
    );
    assert!(rows.iter().all(|r| r.seed == cfg.seed), "identical seed per row");
    assert!(rows.iter().all(|r| r.pq.is_finite()));
    println!("  mode ordering at toy scale (reported, not gated):");
    for row in &rows {
        println!("    {:<16} PQ {:.4}", row.mode, row.pq);
    }

    // Disconnected mode with zeroed graph weights reproduces the baseline
    // classifiers bit-exactly.
    let mut r = rng(8);
    let mut zeroed = PipelineParams::random_init(
        &PipelineConfig {
            mode: PipelineMode::Disconnected,
            ..pipe.clone()
        },
        &mut r,
    )
    .unwrap();
    for layer in &mut zeroed.reasoning.layers {
        layer.w_th = Mat::zeros(layer.w_th.rows(), layer.w_th.cols());
        layer.w_st = Mat::zeros(layer.w_st.rows(), layer.w_st.cols());
    }
    zeroed.projection.w_intra_th = Mat::zeros(
        zeroed.projection.w_intra_th.rows(),
        zeroed.projection.w_intra_th.cols(),
    );
    zeroed.projection.w_intra_st = Mat::zeros(
        zeroed.projection.w_intra_st.rows(),
        zeroed.projection.w_intra_st.cols(),
    );
    let scene = generate_scene(&gen, 99).unwrap();
    let inputs = bgr_core::pipeline::SceneInputs {
        thing_features: bgr_core::graphs::build_thing_nodes(&scene.regions).unwrap(),
        features: scene.features.clone(),
        scores: scene.scores.clone(),
        node_embeddings: None,
    };
    let out = bgr_core::pipeline::forward(
        &PipelineConfig {
            mode: PipelineMode::Disconnected,
            ..pipe.clone()
        },
        &zeroed,
        &inputs,
    )
    .unwrap();
    let baseline_things = classify_regions(
        &inputs.thing_features,
        &Mat::zeros(inputs.thing_features.rows(), pipe.d1),
        &zeroed.projection,
    )
    .unwrap();
    assert_eq!(out.thing_logits, baseline_things, "thing baseline must be bit-exact");
    let zero_fst = FeatureMap::new(
        pipe.d2,
        gen.height,
        gen.width,
        vec![0.0; pipe.d2 * gen.height * gen.width],
    )
    .unwrap();
    let baseline_stuff = segment_pixels(&scene.features, &zero_fst, &zeroed.projection).unwrap();
    assert_eq!(out.refined, baseline_stuff, "stuff baseline must be bit-exact");

    pass(8, "ablation emits the 7-mode table with a fixed seed; zeroed disconnected mode reproduces the baseline bit-exactly");
}

// ---------------------------------------------------------------------------
// 9. Determinism and formats
// ---------------------------------------------------------------------------

#[test]
fn criterion_9_determinism_and_formats() {
    let mut r = rng(9);

    // BGRM byte-exact round-trip, including a second write.
    let mat = Mat::random_uniform(6, 9, -1e9, 1e9, &mut r);
    let bytes = bgr_core::io::write_bgrm(&mat).unwrap();
    let back = bgr_core::io::read_bgrm(&bytes).unwrap();
    assert_eq!(back, mat);
    assert_eq!(bgr_core::io::write_bgrm(&back).unwrap(), bytes);

    // BGRP + segment table round-trip through files.
    let dir = tempfile::tempdir().unwrap();
    let scene = generate_scene(&GenConfig::default(), 31).unwrap();
    let map_path = dir.path().join("map.bgrp");
    bgr_core::io::save_panoptic(&map_path, &scene.gt_panoptic).unwrap();
    let loaded = bgr_core::io::load_panoptic(&map_path).unwrap();
    assert_eq!(loaded, scene.gt_panoptic);
    let first_bytes = (
        std::fs::read(&map_path).unwrap(),
        std::fs::read(dir.path().join("map.bgrp.json")).unwrap(),
    );
    bgr_core::io::save_panoptic(&map_path, &loaded).unwrap();
    assert_eq!(std::fs::read(&map_path).unwrap(), first_bytes.0);
    assert_eq!(std::fs::read(dir.path().join("map.bgrp.json")).unwrap(), first_bytes.1);

    // Feature/score maps round-trip.
    let f_path = dir.path().join("f.bgrm");
    bgr_core::io::save_feature_map(&f_path, &scene.features).unwrap();
    assert_eq!(bgr_core::io::load_feature_map(&f_path).unwrap(), scene.features);
    let s_path = dir.path().join("s.bgrm");
    bgr_core::io::save_score_map(&s_path, &scene.scores).unwrap();
    assert_eq!(bgr_core::io::load_score_map(&s_path).unwrap(), scene.scores);

    // Identical (seed, config) -> identical checkpoint bytes and logs.
    let gen = GenConfig {
        height: 9,
        width: 9,
        feature_dim: 8,
        ..GenConfig::default()
    };
    let pipe = PipelineConfig {
        n_dim: 8,
        d0: 4,
        d1: 4,
        d2: 4,
        ..PipelineConfig::default()
    };
    let cfg = TrainConfig {
        iterations: 15,
        lr_drops: [9, 12],
        eval_every: 5,
        ..TrainConfig::default()
    };
    let a = train(&cfg, &pipe, &gen, None).unwrap();
    let b = train(&cfg, &pipe, &gen, None).unwrap();
    assert_eq!(a.log_lines, b.log_lines, "logs must be identical");
    let dir_a = dir.path().join("ck_a");
    let dir_b = dir.path().join("ck_b");
    bgr_core::io::save_checkpoint(&dir_a, &pipe, &gen, &gen.class_table(), &a.params).unwrap();
    bgr_core::io::save_checkpoint(&dir_b, &pipe, &gen, &gen.class_table(), &b.params).unwrap();
    let mut entries: Vec<_> = std::fs::read_dir(&dir_a)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    entries.sort();
    assert!(!entries.is_empty());
    for name in entries {
        let bytes_a = std::fs::read(dir_a.join(&name)).unwrap();
        let bytes_b = std::fs::read(dir_b.join(&name)).unwrap();
        assert_eq!(bytes_a, bytes_b, "checkpoint file {name:?} differs");
    }

    // Checkpoint reload reproduces identical evaluation reports.
    let (manifest, reloaded) = bgr_core::io::load_checkpoint(&dir_a).unwrap();
    let eval_a =
        bgr_core::toytask::evaluate_toy(&manifest.pipeline, &a.params, &manifest.gen, 6, 777, None, 1)
            .unwrap();
    let eval_b =
        bgr_core::toytask::evaluate_toy(&manifest.pipeline, &reloaded, &manifest.gen, 6, 777, None, 1)
            .unwrap();
    assert_eq!(eval_a, eval_b);
    let report_a = serde_json::to_vec(&bgr_core::io::PqReport::from(&eval_a)).unwrap();
    let report_b = serde_json::to_vec(&bgr_core::io::PqReport::from(&eval_b)).unwrap();
    assert_eq!(report_a, report_b);

    pass(9, "all formats round-trip bit-exactly; identical (seed, config) gives identical checkpoints, logs and reports");
}
