//! Command implementations.

use std::fs;
use std::path::{Path, PathBuf};

use bgr_core::config::RunConfig;
use bgr_core::fusion::{fuse as fuse_maps, FusionConfig};
use bgr_core::graphs::{center_similarity_map, extract_class_centers};
use bgr_core::io;
use bgr_core::metrics::{panoptic_quality, ClassDef, ClassTable};
use bgr_core::pipeline::PipelineMode;
use bgr_core::toytask::{self, class_embedding_matrix, generate_scene};
use bgr_core::Error;

use crate::{CliError, CliResult};

fn read_env_threads() -> Result<usize, Error> {
    match std::env::var("BGR_THREADS") {
        Ok(v) => v
            .parse::<usize>()
            .ok()
            .filter(|&t| t >= 1)
            .ok_or_else(|| Error::Config(format!("BGR_THREADS must be a positive integer, got '{v}'"))),
        Err(_) => Ok(1),
    }
}

fn load_config(path: Option<&Path>) -> Result<RunConfig, Error> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_embedding_table(
    cfg: &RunConfig,
    explicit: Option<&Path>,
) -> Result<Option<io::EmbeddingFile>, Error> {
    let path = explicit.or(cfg.embedding_file.as_deref());
    match (cfg.pipeline.mode, path) {
        (PipelineMode::Cosine, None) => Err(Error::Config(
            "cosine mode requires an embedding file (config embedding_file or --embeddings)".into(),
        )),
        (_, Some(p)) => Ok(Some(io::load_embeddings(p)?)),
        (_, None) => Ok(None),
    }
}

pub fn gradcheck(
    filter: Option<&str>,
    eps: f64,
    tol: f64,
    seed: u64,
    inject_fault: bool,
) -> CliResult {
    let reports = bgr_core::gradsuite::run_suite(filter, eps, tol, seed, inject_fault)?;
    println!("{:<26} {:>7} {:>14}  {}", "op", "trials", "max_rel_err", "status");
    let mut failures = 0usize;
    for r in &reports {
        println!(
            "{:<26} {:>7} {:>14.3e}  {}",
            r.name,
            r.trials,
            r.max_rel_err,
            if r.pass { "ok" } else { "FAIL" }
        );
        if !r.pass {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Verification(format!(
            "{failures} of {} gradient checks failed (eps={eps}, tol={tol})",
            reports.len()
        )));
    }
    println!("all {} gradient checks passed (eps={eps}, tol={tol})", reports.len());
    Ok(())
}

pub fn gen(config: Option<&Path>, seed: Option<u64>, out: &Path) -> CliResult {
    let cfg = load_config(config)?;
    let seed = seed.unwrap_or(cfg.train.seed);
    let scene = generate_scene(&cfg.gen, seed)?;
    fs::create_dir_all(out).map_err(Error::from)?;

    io::save_feature_map(&out.join("features.bgrm"), &scene.features)?;
    io::save_score_map(&out.join("scores.bgrm"), &scene.scores)?;
    io::save_panoptic(&out.join("gt.bgrp"), &scene.gt_panoptic)?;
    io::save_bgrm(
        &out.join("semantic.bgrm"),
        &io::class_raster_to_mat(&scene.semantic_gt()),
    )?;

    // Ground-truth-derived instance predictions (each gt mask at score 1.0,
    // then every jittered proposal at its own score).
    let mut instances = Vec::new();
    for thing in &scene.things {
        instances.push(bgr_core::fusion::InstancePrediction::new(
            thing.mask.clone(),
            thing.thing_class as u32,
            1.0,
        )?);
    }
    for (proposal, &label) in scene.regions.proposals.iter().zip(&scene.proposal_labels) {
        if let Some(mask) = &proposal.mask {
            instances.push(bgr_core::fusion::InstancePrediction::new(
                mask.clone(),
                label as u32,
                proposal.score,
            )?);
        }
    }
    io::save_instances(
        &out.join("instances.json"),
        &io::InstancesFile::from_instances(&instances, scene.height, scene.width)?,
    )?;

    // Class table and per-class embeddings (columns of the generator's
    // embedding matrix), usable as the cosine-mode embedding file.
    let table = cfg.gen.class_table();
    let json = serde_json::to_vec_pretty(&table).map_err(Error::from)?;
    fs::write(out.join("classes.json"), append_newline(json)).map_err(Error::from)?;
    let embedding = class_embedding_matrix(&cfg.gen);
    let mut entries = std::collections::BTreeMap::new();
    for (id, class) in table.classes.iter().enumerate() {
        let col: Vec<f64> = (0..cfg.gen.feature_dim).map(|ch| embedding.get(ch, id)).collect();
        entries.insert(class.name.clone(), col);
    }
    io::save_embeddings(
        &out.join("embeddings.json"),
        &io::EmbeddingFile {
            dim: cfg.gen.feature_dim,
            embeddings: entries,
        },
    )?;

    let effective = serde_json::to_vec_pretty(&cfg).map_err(Error::from)?;
    fs::write(out.join("run_config.json"), append_newline(effective)).map_err(Error::from)?;
    println!(
        "wrote scene seed {seed} ({} things, {} proposals) to {}",
        scene.things.len(),
        scene.regions.len(),
        out.display()
    );
    Ok(())
}

fn append_newline(mut bytes: Vec<u8>) -> Vec<u8> {
    bytes.push(b'\n');
    bytes
}

pub fn train(
    config: Option<&Path>,
    seed: Option<u64>,
    mode: Option<&str>,
    out: Option<&Path>,
) -> CliResult {
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    if let Some(mode) = mode {
        cfg.pipeline.mode = mode.parse()?;
    }
    cfg.validate()?;
    let out_dir: PathBuf = out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Error::Config("no output directory (config output_dir or --out)".into()))?;
    let embeddings = load_embedding_table(&cfg, None)?;

    let outcome = toytask::train(&cfg.train, &cfg.pipeline, &cfg.gen, embeddings.as_ref())?;

    fs::create_dir_all(&out_dir).map_err(Error::from)?;
    let ckpt_dir = out_dir.join("checkpoint");
    io::save_checkpoint(
        &ckpt_dir,
        &cfg.pipeline,
        &cfg.gen,
        &cfg.gen.class_table(),
        &outcome.params,
    )?;
    let mut log = outcome.log_lines.join("\n");
    log.push('\n');
    fs::write(out_dir.join("train_log.jsonl"), log).map_err(Error::from)?;

    if let Some(div) = &outcome.divergence {
        return Err(CliError::Verification(format!(
            "training diverged at iteration {} ({}); last good checkpoint written to {}",
            div.iter,
            div.detail,
            ckpt_dir.display()
        )));
    }
    println!(
        "trained {} iterations (mode {}): loss {:.4} -> {:.4}; checkpoint at {}",
        cfg.train.iterations,
        cfg.pipeline.mode.name(),
        outcome.first_loss,
        outcome.final_loss,
        ckpt_dir.display()
    );
    Ok(())
}

fn print_pq(report: &io::PqReport) {
    println!(
        "PQ {:.4}  PQ_th {:.4}  PQ_st {:.4}  SQ {:.4}  RQ {:.4}",
        report.pq, report.pq_th, report.pq_st, report.sq, report.rq
    );
    for (class, q) in &report.per_class {
        println!(
            "  class {:<3} pq {:.4}  sq {:.4}  rq {:.4}  tp {} fp {} fn {}",
            class, q.pq, q.sq, q.rq, q.counts.tp, q.counts.fp, q.counts.fn_
        );
    }
}

pub fn eval(
    checkpoint: &Path,
    scenes: usize,
    seed: u64,
    embeddings: Option<&Path>,
    out: Option<&Path>,
) -> CliResult {
    let threads = read_env_threads()?;
    let (manifest, params) = io::load_checkpoint(checkpoint)?;
    let table = match (manifest.pipeline.mode, embeddings) {
        (PipelineMode::Cosine, None) => {
            return Err(CliError::Usage(Error::Config(
                "checkpoint uses cosine mode; pass --embeddings".into(),
            )))
        }
        (_, Some(p)) => Some(io::load_embeddings(p)?),
        (_, None) => None,
    };
    let result = toytask::evaluate_toy(
        &manifest.pipeline,
        &params,
        &manifest.gen,
        scenes,
        seed,
        table.as_ref(),
        threads,
    )?;
    let report = io::PqReport::from(&result);
    print_pq(&report);
    if let Some(path) = out {
        io::save_pq_report(path, &report)?;
    }
    Ok(())
}

pub fn ablate(config: Option<&Path>, seed: Option<u64>, scenes: usize, out: Option<&Path>) -> CliResult {
    let threads = read_env_threads()?;
    let mut cfg = load_config(config)?;
    if let Some(seed) = seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate()?;
    cfg.gen.validate()?;
    let embeddings = match cfg.embedding_file.as_deref() {
        Some(p) => Some(io::load_embeddings(p)?),
        None => {
            return Err(CliError::Usage(Error::Config(
                "ablation includes the cosine mode; config must set embedding_file".into(),
            )))
        }
    };
    let rows = toytask::ablate(
        &cfg.train,
        &cfg.pipeline,
        &cfg.gen,
        embeddings.as_ref(),
        scenes,
        threads,
    )?;
    println!(
        "{:<16} {:>6} {:>8} {:>8} {:>8} {:>12}",
        "mode", "seed", "PQ", "PQ_th", "PQ_st", "final_loss"
    );
    for row in &rows {
        println!(
            "{:<16} {:>6} {:>8.4} {:>8.4} {:>8.4} {:>12.4}",
            row.mode, row.seed, row.pq, row.pq_things, row.pq_stuff, row.final_loss
        );
    }
    if let Some(path) = out {
        let json = serde_json::to_vec_pretty(&rows).map_err(Error::from)?;
        fs::write(path, append_newline(json)).map_err(Error::from)?;
    }
    Ok(())
}

pub fn fuse(
    instances_path: &Path,
    semantic_path: &Path,
    out: &Path,
    score_thresh: Option<f64>,
    keep_frac: Option<f64>,
    min_stuff_area: Option<u64>,
) -> CliResult {
    let instances = io::load_instances(instances_path)?.to_instances()?;
    let semantic = io::class_raster_from_mat(&io::load_bgrm(semantic_path)?)?;
    let mut cfg = FusionConfig::default();
    if let Some(v) = score_thresh {
        cfg.score_thresh = v;
    }
    if let Some(v) = keep_frac {
        cfg.keep_frac = v;
    }
    if min_stuff_area.is_some() {
        cfg.min_stuff_area = min_stuff_area;
    }
    let map = fuse_maps(&instances, &semantic, &cfg)?;
    io::save_panoptic(out, &map)?;
    println!(
        "fused {} instances into {} segments over {}x{}",
        instances.len(),
        map.segments().len(),
        map.height(),
        map.width()
    );
    Ok(())
}

/// Build the class table implied by the segment tables of both maps,
/// rejecting thing/stuff contradictions.
fn derive_class_table(maps: &[&bgr_core::fusion::PanopticMap]) -> Result<ClassTable, Error> {
    let mut flags: std::collections::BTreeMap<u32, bool> = std::collections::BTreeMap::new();
    for map in maps {
        for seg in map.segments() {
            if let Some(&prev) = flags.get(&seg.class_id) {
                if prev != seg.is_thing {
                    return Err(Error::Config(format!(
                        "class {} is marked both thing and stuff across the segment tables",
                        seg.class_id
                    )));
                }
            } else {
                flags.insert(seg.class_id, seg.is_thing);
            }
        }
    }
    let max = flags.keys().max().copied().map(|m| m as usize + 1).unwrap_or(0);
    let classes = (0..max)
        .map(|id| ClassDef {
            name: format!("class_{id}"),
            is_thing: flags.get(&(id as u32)).copied().unwrap_or(false),
        })
        .collect();
    Ok(ClassTable { classes })
}

pub fn pq(pred_path: &Path, gt_path: &Path, out: Option<&Path>) -> CliResult {
    let pred = io::load_panoptic(pred_path)?;
    let gt = io::load_panoptic(gt_path)?;
    let table = derive_class_table(&[&pred, &gt])?;
    let result = panoptic_quality(&pred, &gt, &table)?;
    let report = io::PqReport::from(&result);
    print_pq(&report);
    if let Some(path) = out {
        io::save_pq_report(path, &report)?;
    }
    Ok(())
}

pub fn centers(features_path: &Path, scores_path: &Path, class_id: usize, out: &Path) -> CliResult {
    let features = io::load_feature_map(features_path)?;
    let scores = io::load_score_map(scores_path)?;
    let centers = extract_class_centers(&features, &scores)?;
    let raster = center_similarity_map(&features, &centers, class_id)?;
    io::save_bgrm(out, &raster)?;
    println!(
        "wrote {}x{} similarity raster for class {class_id} to {}",
        raster.rows(),
        raster.cols(),
        out.display()
    );
    Ok(())
}
