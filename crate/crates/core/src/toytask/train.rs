//! SGD training of the reasoning+projection pipeline on toy scenes, plus
//! checkpoint evaluation and the fixed-seed ablation harness.

use rand::SeedableRng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::fusion::{fuse, FusionConfig, InstancePrediction, PanopticMap};
use crate::graphs::build_thing_nodes;
use crate::io::EmbeddingFile;
use crate::metrics::{pq_stats, PqResult, PqStats};
use crate::pipeline::{
    build_forward, cross_entropy_mean_on_tape, one_hot, InputVars, ParamVars, PipelineConfig,
    PipelineMode, PipelineParams, SceneInputs,
};
use crate::tensor::{ops, Mat, Tape};
use crate::toytask::{generate_scene, GenConfig, ToyScene};

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub iterations: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Iterations at which the learning rate is divided by 10 (two drops).
    pub lr_drops: [usize; 2],
    pub loss_weight_thing: f64,
    pub loss_weight_stuff: f64,
    /// Evaluate on toy scenes every this many iterations; 0 disables.
    pub eval_every: usize,
    pub eval_scenes: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 1,
            iterations: 200,
            batch_size: 2,
            lr: 0.02,
            momentum: 0.9,
            weight_decay: 5e-4,
            lr_drops: [120, 170],
            loss_weight_thing: 1.0,
            loss_weight_stuff: 1.0,
            eval_every: 50,
            eval_scenes: 5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 {
            return Err(Error::Config("iterations and batch_size must be >= 1".into()));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("loss_weight_thing", self.loss_weight_thing),
            ("loss_weight_stuff", self.loss_weight_stuff),
        ] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        for (name, v) in [("momentum", self.momentum), ("weight_decay", self.weight_decay)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be >= 0, got {v}")));
            }
        }
        if self.lr_drops[0] >= self.lr_drops[1] {
            return Err(Error::Config(format!(
                "lr_drops must be strictly ascending, got {:?}",
                self.lr_drops
            )));
        }
        Ok(())
    }
}

/// One parameter update: `v ← μ·v + (g + λ·θ)`, `θ ← θ − lr·v`.
pub fn sgd_update(
    param: &mut Mat,
    grad: &Mat,
    velocity: &mut Mat,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grad.shape() != param.shape() || velocity.shape() != param.shape() {
        return Err(Error::shape("sgd_update", param.shape_str(), grad.shape_str()));
    }
    grad.check_finite("sgd_update gradient")?;
    let adjusted = grad.zip_map(param, "sgd_update", |g, p| g + weight_decay * p)?;
    *velocity = ops::scale_add(velocity, &adjusted, momentum, 1.0)?;
    *param = ops::scale_add(param, velocity, 1.0, -lr)?;
    Ok(())
}

/// Momentum buffers aligned with the canonical parameter order.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Mat>,
}

impl SgdState {
    pub fn zeros_like(params: &PipelineParams) -> Self {
        SgdState {
            velocity: params
                .named()
                .iter()
                .map(|(_, m)| Mat::zeros(m.rows(), m.cols()))
                .collect(),
        }
    }
}

/// Scene inputs plus training targets.
fn scene_to_inputs(
    scene: &ToyScene,
    cfg: &PipelineConfig,
    embeddings: Option<&EmbeddingFile>,
) -> Result<(SceneInputs, Mat, Mat)> {
    let thing_features = build_thing_nodes(&scene.regions)?;
    let thing_features = if thing_features.rows() == 0 {
        Mat::zeros(0, cfg.n_dim)
    } else {
        thing_features
    };
    let node_embeddings = match (cfg.mode, embeddings) {
        (PipelineMode::Cosine, Some(table)) => {
            Some(node_embeddings_for_scene(scene, cfg, table)?)
        }
        (PipelineMode::Cosine, None) => {
            return Err(Error::Config(
                "cosine mode requires an embedding file".into(),
            ))
        }
        _ => None,
    };
    let thing_targets = one_hot(&scene.proposal_labels, cfg.thing_classes)?;
    let stuff_targets = one_hot(&scene.stuff_gt, cfg.stuff_classes)?;
    Ok((
        SceneInputs {
            thing_features,
            features: scene.features.clone(),
            scores: scene.scores.clone(),
            node_embeddings,
        },
        thing_targets,
        stuff_targets,
    ))
}

/// Per-node embeddings for cosine mode: each proposal uses its class name's
/// vector, each stuff node its own.
pub fn node_embeddings_for_scene(
    scene: &ToyScene,
    cfg: &PipelineConfig,
    table: &EmbeddingFile,
) -> Result<Mat> {
    let mut names: Vec<String> = Vec::new();
    if cfg.mode.has_thing_graph() {
        for (i, p) in scene.regions.proposals.iter().enumerate() {
            let class = p
                .class_id
                .ok_or_else(|| Error::Config(format!("proposal {i} has no class for cosine mode")))?;
            let name = scene
                .class_table
                .name(class)
                .ok_or_else(|| Error::Config(format!("class {class} missing from table")))?;
            names.push(name.to_string());
        }
    }
    if cfg.mode.has_stuff_graph() {
        for s in scene.class_table.stuff_ids() {
            names.push(scene.class_table.name(s).unwrap().to_string());
        }
    }
    table.stack(&names)
}

/// Loss components of one scene.
struct SceneLoss {
    total: f64,
    thing: f64,
    stuff: f64,
    grads: Vec<Mat>,
}

fn scene_loss_and_grads(
    cfg: &PipelineConfig,
    params: &PipelineParams,
    scene: &ToyScene,
    embeddings: Option<&EmbeddingFile>,
    weight_thing: f64,
    weight_stuff: f64,
) -> Result<SceneLoss> {
    let (inputs, thing_targets, stuff_targets) = scene_to_inputs(scene, cfg, embeddings)?;
    let mut tape = Tape::new();
    let input_vars = InputVars::register(&inputs, &mut tape, false);
    let param_vars = ParamVars::register(params, &mut tape, true);
    let out = build_forward(
        &mut tape,
        cfg,
        input_vars,
        &param_vars,
        inputs.node_embeddings.as_ref(),
    )?;
    let thing_onehot = tape.constant(thing_targets);
    let stuff_onehot = tape.constant(stuff_targets);
    let loss_thing = cross_entropy_mean_on_tape(&mut tape, out.thing_logits, thing_onehot)?;
    let loss_stuff = cross_entropy_mean_on_tape(&mut tape, out.refined_logits, stuff_onehot)?;
    let total = tape.scale_add(loss_thing, loss_stuff, weight_thing, weight_stuff)?;
    let grads = tape.backward(total)?;
    Ok(SceneLoss {
        total: tape.value(total).get(0, 0),
        thing: tape.value(loss_thing).get(0, 0),
        stuff: tape.value(loss_stuff).get(0, 0),
        grads: param_vars
            .ordered()
            .iter()
            .map(|&v| grads.wrt_or_zero(v, &tape))
            .collect(),
    })
}

/// Training divergence diagnostic.
#[derive(Debug, Clone, Serialize)]
pub struct DivergenceInfo {
    pub iter: usize,
    pub detail: String,
}

/// Training result: final (or last good) parameters and the JSON-lines log.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: PipelineParams,
    pub log_lines: Vec<String>,
    pub first_loss: f64,
    pub final_loss: f64,
    pub divergence: Option<DivergenceInfo>,
}

#[derive(Serialize)]
struct TrainLogLine {
    iter: usize,
    loss_thing: f64,
    loss_stuff: f64,
    lr: f64,
}

#[derive(Serialize)]
struct EvalLogLine {
    iter: usize,
    pq: f64,
    pq_things: f64,
    pq_stuff: f64,
}

/// Deterministic SGD training over a fixed batch of `batch_size` scenes
/// (seeds `train.seed + 1 + index`). Every iteration takes one full-batch
/// step, so with lr = 0 the loss trajectory is exactly constant; evaluation
/// scenes come from an offset seed stream.
pub fn train(
    train_cfg: &TrainConfig,
    pipe_cfg: &PipelineConfig,
    gen: &GenConfig,
    embeddings: Option<&EmbeddingFile>,
) -> Result<TrainOutcome> {
    train_cfg.validate()?;
    pipe_cfg.validate()?;
    gen.validate()?;
    check_compat(pipe_cfg, gen)?;

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(train_cfg.seed);
    let mut params = PipelineParams::random_init(pipe_cfg, &mut rng)?;
    let mut state = SgdState::zeros_like(&params);
    let mut lr = train_cfg.lr;
    let mut log_lines = Vec::new();
    let mut first_loss = f64::NAN;
    let mut final_loss = f64::NAN;

    let scenes: Vec<ToyScene> = (0..train_cfg.batch_size)
        .map(|j| generate_scene(gen, train_cfg.seed.wrapping_add(1 + j as u64)))
        .collect::<Result<_>>()?;

    for iter in 0..train_cfg.iterations {
        if iter == train_cfg.lr_drops[0] || iter == train_cfg.lr_drops[1] {
            lr /= 10.0;
        }
        let mut batch_grads: Option<Vec<Mat>> = None;
        let mut loss_sum = 0.0;
        let mut loss_thing_sum = 0.0;
        let mut loss_stuff_sum = 0.0;
        for scene in &scenes {
            let sl = scene_loss_and_grads(
                pipe_cfg,
                &params,
                scene,
                embeddings,
                train_cfg.loss_weight_thing,
                train_cfg.loss_weight_stuff,
            )?;
            loss_sum += sl.total;
            loss_thing_sum += sl.thing;
            loss_stuff_sum += sl.stuff;
            batch_grads = Some(match batch_grads {
                None => sl.grads,
                Some(acc) => acc
                    .iter()
                    .zip(&sl.grads)
                    .map(|(a, g)| ops::scale_add(a, g, 1.0, 1.0).expect("aligned shapes"))
                    .collect(),
            });
        }
        let inv_b = 1.0 / train_cfg.batch_size as f64;
        let loss = loss_sum * inv_b;
        if !loss.is_finite() {
            let info = DivergenceInfo {
                iter,
                detail: format!("combined loss is {loss}"),
            };
            log::error!("training diverged at iteration {iter}: {}", info.detail);
            return Ok(TrainOutcome {
                params,
                log_lines,
                first_loss,
                final_loss,
                divergence: Some(info),
            });
        }
        if iter == 0 {
            first_loss = loss;
        }
        final_loss = loss;

        let grads = batch_grads.expect("batch_size >= 1");
        // Reject non-finite gradients before touching any parameter, so the
        // returned state is genuinely the last good one.
        let grad_issue = params
            .named()
            .iter()
            .zip(&grads)
            .find_map(|((name, _), g)| g.first_non_finite().map(|(r, c)| (name.clone(), r, c)));
        if let Some((name, r, c)) = grad_issue {
            let info = DivergenceInfo {
                iter,
                detail: format!("gradient for '{name}' is non-finite at ({r},{c})"),
            };
            log::error!("training diverged at iteration {iter}: {}", info.detail);
            return Ok(TrainOutcome {
                params,
                log_lines,
                first_loss,
                final_loss,
                divergence: Some(info),
            });
        }
        let mut named = params.named_mut();
        for (slot, ((name, param), grad)) in named.iter_mut().zip(&grads).enumerate() {
            let scaled = grad.map(|g| g * inv_b);
            if let Err(e) = sgd_update(
                param,
                &scaled,
                &mut state.velocity[slot],
                lr,
                train_cfg.momentum,
                train_cfg.weight_decay,
            ) {
                return Err(Error::Divergence {
                    iter,
                    detail: format!("parameter '{name}': {e}"),
                });
            }
        }
        drop(named);

        log_lines.push(
            serde_json::to_string(&TrainLogLine {
                iter,
                loss_thing: loss_thing_sum * inv_b,
                loss_stuff: loss_stuff_sum * inv_b,
                lr,
            })
            .expect("log line serializes"),
        );

        if train_cfg.eval_every > 0 && (iter + 1) % train_cfg.eval_every == 0 {
            let pq = evaluate_toy(
                pipe_cfg,
                &params,
                gen,
                train_cfg.eval_scenes,
                eval_seed(train_cfg.seed),
                embeddings,
                1,
            )?;
            log_lines.push(
                serde_json::to_string(&EvalLogLine {
                    iter,
                    pq: pq.pq,
                    pq_things: pq.pq_things,
                    pq_stuff: pq.pq_stuff,
                })
                .expect("log line serializes"),
            );
        }
    }

    Ok(TrainOutcome {
        params,
        log_lines,
        first_loss,
        final_loss,
        divergence: None,
    })
}

/// Seed of the evaluation scene stream used by periodic in-training
/// evaluation and by the ablation harness for a given training seed.
pub fn ablation_eval_seed(seed: u64) -> u64 {
    seed.wrapping_add(0x00E7_A15E)
}

fn eval_seed(seed: u64) -> u64 {
    ablation_eval_seed(seed)
}

fn check_compat(pipe_cfg: &PipelineConfig, gen: &GenConfig) -> Result<()> {
    if pipe_cfg.n_dim != gen.feature_dim {
        return Err(Error::Checkpoint(format!(
            "pipeline n_dim {} != generator feature_dim {}",
            pipe_cfg.n_dim, gen.feature_dim
        )));
    }
    if pipe_cfg.thing_classes != gen.thing_classes
        || pipe_cfg.stuff_classes != gen.stuff_classes
    {
        return Err(Error::Checkpoint(format!(
            "pipeline classes {}+{} != generator classes {}+{}",
            pipe_cfg.thing_classes, pipe_cfg.stuff_classes, gen.thing_classes, gen.stuff_classes
        )));
    }
    Ok(())
}

/// Run the full pipeline on one scene and fuse into a panoptic prediction.
pub fn predict_scene(
    cfg: &PipelineConfig,
    params: &PipelineParams,
    scene: &ToyScene,
    embeddings: Option<&EmbeddingFile>,
    fusion_cfg: &FusionConfig,
) -> Result<PanopticMap> {
    let (inputs, _, _) = scene_to_inputs(scene, cfg, embeddings)?;
    let out = crate::pipeline::forward(cfg, params, &inputs)?;
    let posteriors = ops::softmax_axis(&out.thing_logits, crate::tensor::Axis::Rows);
    let mut instances = Vec::new();
    for (i, proposal) in scene.regions.proposals.iter().enumerate() {
        let mask = match &proposal.mask {
            Some(m) => m.clone(),
            None => continue,
        };
        let row = posteriors.row(i);
        let (best, best_p) = row
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |(bi, bv), (ci, &v)| {
                if v > bv {
                    (ci, v)
                } else {
                    (bi, bv)
                }
            });
        instances.push(InstancePrediction::new(
            mask,
            best as u32,
            (proposal.score * best_p).clamp(0.0, 1.0),
        )?);
    }
    let refined = out.refined;
    let local = refined.argmax_raster();
    let semantic = crate::fusion::ClassRaster::new(
        scene.height,
        scene.width,
        local
            .iter()
            .map(|&s| (cfg.thing_classes + s) as u32)
            .collect(),
    )?;
    fuse(&instances, &semantic, fusion_cfg)
}

/// Evaluate a checkpoint over `n_scenes` generated scenes; per-scene seeds
/// are `seed + index`, and per-scene stats are merged by the two-phase
/// reduction. `threads > 1` distributes scenes over that many OS threads.
pub fn evaluate_toy(
    cfg: &PipelineConfig,
    params: &PipelineParams,
    gen: &GenConfig,
    n_scenes: usize,
    seed: u64,
    embeddings: Option<&EmbeddingFile>,
    threads: usize,
) -> Result<PqResult> {
    if n_scenes == 0 {
        return Err(Error::Config("evaluation needs at least one scene".into()));
    }
    check_compat(cfg, gen)?;
    let fusion_cfg = FusionConfig::default();
    let table = gen.class_table();

    let scene_stats = |index: usize| -> Result<PqStats> {
        let scene = generate_scene(gen, seed.wrapping_add(index as u64))?;
        let pred = predict_scene(cfg, params, &scene, embeddings, &fusion_cfg)?;
        pq_stats(&pred, &scene.gt_panoptic, &table)
    };

    let threads = threads.max(1).min(n_scenes);
    let mut results: Vec<Option<Result<PqStats>>> = (0..n_scenes).map(|_| None).collect();
    if threads == 1 {
        for (i, slot) in results.iter_mut().enumerate() {
            *slot = Some(scene_stats(i));
        }
    } else {
        let chunk = n_scenes.div_ceil(threads);
        std::thread::scope(|scope| {
            for (t, slots) in results.chunks_mut(chunk).enumerate() {
                let scene_stats = &scene_stats;
                scope.spawn(move || {
                    for (j, slot) in slots.iter_mut().enumerate() {
                        *slot = Some(scene_stats(t * chunk + j));
                    }
                });
            }
        });
    }

    let mut merged = PqStats::default();
    for slot in results {
        merged.merge(&slot.expect("every scene ran")?);
    }
    merged.finalize(&table)
}

/// One row of the ablation table.
#[derive(Debug, Clone, Serialize)]
pub struct AblateRow {
    pub mode: String,
    pub seed: u64,
    pub pq: f64,
    pub pq_things: f64,
    pub pq_stuff: f64,
    pub final_loss: f64,
}

/// Train and evaluate every pipeline mode with identical seeds so the rows
/// differ only in mode.
pub fn ablate(
    train_cfg: &TrainConfig,
    pipe_cfg: &PipelineConfig,
    gen: &GenConfig,
    embeddings: Option<&EmbeddingFile>,
    eval_scenes: usize,
    threads: usize,
) -> Result<Vec<AblateRow>> {
    let mut rows = Vec::new();
    for mode in crate::pipeline::ALL_MODES {
        let mut cfg = pipe_cfg.clone();
        cfg.mode = mode;
        let outcome = train(train_cfg, &cfg, gen, embeddings)?;
        if let Some(d) = &outcome.divergence {
            return Err(Error::Divergence {
                iter: d.iter,
                detail: format!("mode {}: {}", mode.name(), d.detail),
            });
        }
        let pq = evaluate_toy(
            &cfg,
            &outcome.params,
            gen,
            eval_scenes,
            eval_seed(train_cfg.seed),
            embeddings,
            threads,
        )?;
        rows.push(AblateRow {
            mode: mode.name().to_string(),
            seed: train_cfg.seed,
            pq: pq.pq,
            pq_things: pq.pq_things,
            pq_stuff: pq.pq_stuff,
            final_loss: outcome.final_loss,
        });
    }
    Ok(rows)
}
