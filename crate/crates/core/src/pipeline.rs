//! The assembled forward pass: thing nodes and class centers in, thing
//! logits and refined stuff logits out, all on one tape so training and
//! gradient checking cover the exact production path.

use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graphs::{class_centers_on_tape, FeatureMap, ScoreMap};
use crate::projection::{
    classify_regions_on_tape, project_stuff_on_tape, project_things_on_tape,
    segment_pixels_on_tape, LinearHead, ProjectionParams,
};
use crate::reasoning::{
    run_reasoning_on_tape, AttentionHead, DirectionMode, LayerVars, ReasoningLayerParams,
    ReasoningStack,
};
use crate::tensor::{Mat, Tape, Var};

/// Pipeline-level mode: the five reasoning directions plus the two
/// single-graph ablations where one branch has no graph at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PipelineMode {
    Bidirectional,
    ThingToStuff,
    StuffToThing,
    Disconnected,
    ThingOnly,
    StuffOnly,
    Cosine,
}

pub const ALL_MODES: [PipelineMode; 7] = [
    PipelineMode::Bidirectional,
    PipelineMode::ThingToStuff,
    PipelineMode::StuffToThing,
    PipelineMode::Disconnected,
    PipelineMode::ThingOnly,
    PipelineMode::StuffOnly,
    PipelineMode::Cosine,
];

impl PipelineMode {
    pub fn name(self) -> &'static str {
        match self {
            PipelineMode::Bidirectional => "bidirectional",
            PipelineMode::ThingToStuff => "thing-to-stuff",
            PipelineMode::StuffToThing => "stuff-to-thing",
            PipelineMode::Disconnected => "disconnected",
            PipelineMode::ThingOnly => "thing-only",
            PipelineMode::StuffOnly => "stuff-only",
            PipelineMode::Cosine => "cosine",
        }
    }

    /// Direction mask for the joint graph; the single-graph modes reason
    /// over one partition, which the disconnected mask covers.
    pub fn direction(self) -> DirectionMode {
        match self {
            PipelineMode::Bidirectional => DirectionMode::Bidirectional,
            PipelineMode::ThingToStuff => DirectionMode::ThingToStuff,
            PipelineMode::StuffToThing => DirectionMode::StuffToThing,
            PipelineMode::Disconnected | PipelineMode::ThingOnly | PipelineMode::StuffOnly => {
                DirectionMode::Disconnected
            }
            PipelineMode::Cosine => DirectionMode::Cosine,
        }
    }

    pub fn has_thing_graph(self) -> bool {
        self != PipelineMode::StuffOnly
    }

    pub fn has_stuff_graph(self) -> bool {
        self != PipelineMode::ThingOnly
    }
}

impl FromStr for PipelineMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_MODES
            .iter()
            .find(|m| m.name() == s)
            .copied()
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown mode '{s}'; expected one of {}",
                    ALL_MODES.map(|m| m.name()).join(", ")
                ))
            })
    }
}

/// Structural hyperparameters of the pipeline. The default is the desk-scale
/// profile (width 16); the full-scale profile uses 128 for every dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub n_dim: usize,
    pub d0: usize,
    pub d1: usize,
    pub d2: usize,
    pub t_layers: usize,
    pub heads: usize,
    pub thing_classes: usize,
    pub stuff_classes: usize,
    pub mode: PipelineMode,
    pub leaky_slope: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            n_dim: 16,
            d0: 16,
            d1: 16,
            d2: 16,
            t_layers: 2,
            heads: 3,
            thing_classes: 3,
            stuff_classes: 3,
            mode: PipelineMode::Bidirectional,
            leaky_slope: 0.2,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_dim", self.n_dim),
            ("d0", self.d0),
            ("d1", self.d1),
            ("d2", self.d2),
            ("t_layers", self.t_layers),
            ("heads", self.heads),
            ("thing_classes", self.thing_classes),
            ("stuff_classes", self.stuff_classes),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be >= 1")));
            }
        }
        crate::tensor::ops::check_leaky_slope(self.leaky_slope)?;
        Ok(())
    }

    /// Node width after all reasoning layers.
    pub fn reasoned_width(&self) -> usize {
        self.n_dim + self.t_layers * self.d0
    }
}

/// All trainable parameters.
#[derive(Debug, Clone)]
pub struct PipelineParams {
    pub reasoning: ReasoningStack,
    pub projection: ProjectionParams,
}

impl PipelineParams {
    pub fn random_init(cfg: &PipelineConfig, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(PipelineParams {
            reasoning: ReasoningStack::random_init(
                cfg.n_dim,
                cfg.d0,
                cfg.t_layers,
                cfg.heads,
                cfg.mode.direction(),
                cfg.leaky_slope,
                rng,
            )?,
            projection: ProjectionParams::random_init(
                cfg.n_dim,
                cfg.reasoned_width(),
                cfg.d1,
                cfg.d2,
                cfg.thing_classes,
                cfg.stuff_classes,
                rng,
            ),
        })
    }

    /// Canonical (name, matrix) listing; the order is the checkpoint and
    /// optimizer-state order.
    pub fn named(&self) -> Vec<(String, &Mat)> {
        let mut out = Vec::new();
        for (k, layer) in self.reasoning.layers.iter().enumerate() {
            out.push((format!("layer{k}.w_th"), &layer.w_th));
            out.push((format!("layer{k}.w_st"), &layer.w_st));
            for (i, head) in layer.heads.iter().enumerate() {
                out.push((format!("layer{k}.head{i}.w_pair"), &head.w_pair));
            }
        }
        out.push(("projection.w_intra_th".into(), &self.projection.w_intra_th));
        out.push(("projection.w_intra_st".into(), &self.projection.w_intra_st));
        out.push(("thing_head.weight".into(), &self.projection.thing_classifier.weight));
        out.push(("thing_head.bias".into(), &self.projection.thing_classifier.bias));
        out.push(("stuff_head.weight".into(), &self.projection.stuff_classifier.weight));
        out.push(("stuff_head.bias".into(), &self.projection.stuff_classifier.bias));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Mat)> {
        let mut out = Vec::new();
        for (k, layer) in self.reasoning.layers.iter_mut().enumerate() {
            out.push((format!("layer{k}.w_th"), &mut layer.w_th));
            out.push((format!("layer{k}.w_st"), &mut layer.w_st));
            for (i, head) in layer.heads.iter_mut().enumerate() {
                out.push((format!("layer{k}.head{i}.w_pair"), &mut head.w_pair));
            }
        }
        out.push(("projection.w_intra_th".into(), &mut self.projection.w_intra_th));
        out.push(("projection.w_intra_st".into(), &mut self.projection.w_intra_st));
        out.push((
            "thing_head.weight".into(),
            &mut self.projection.thing_classifier.weight,
        ));
        out.push((
            "thing_head.bias".into(),
            &mut self.projection.thing_classifier.bias,
        ));
        out.push((
            "stuff_head.weight".into(),
            &mut self.projection.stuff_classifier.weight,
        ));
        out.push((
            "stuff_head.bias".into(),
            &mut self.projection.stuff_classifier.bias,
        ));
        out
    }

    /// Rebuild from named matrices (checkpoint load). Every parameter must
    /// be present with the shape implied by `cfg`.
    pub fn from_named(cfg: &PipelineConfig, lookup: &dyn Fn(&str) -> Option<Mat>) -> Result<Self> {
        cfg.validate()?;
        let fetch = |name: String, rows: usize, cols: usize| -> Result<Mat> {
            let m = lookup(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter '{name}'")))?;
            if m.shape() != (rows, cols) {
                return Err(Error::Checkpoint(format!(
                    "parameter '{name}' has shape {}, expected {rows}x{cols}",
                    m.shape_str()
                )));
            }
            Ok(m)
        };
        let mut layers = Vec::new();
        for k in 0..cfg.t_layers {
            let d_in = cfg.n_dim + k * cfg.d0;
            let w_th = fetch(format!("layer{k}.w_th"), d_in, cfg.d0)?;
            let w_st = fetch(format!("layer{k}.w_st"), d_in, cfg.d0)?;
            let mut heads = Vec::new();
            for i in 0..cfg.heads {
                heads.push(AttentionHead::new(fetch(
                    format!("layer{k}.head{i}.w_pair"),
                    1,
                    2 * d_in,
                )?)?);
            }
            layers.push(ReasoningLayerParams { w_th, w_st, heads });
        }
        let width = cfg.reasoned_width();
        Ok(PipelineParams {
            reasoning: ReasoningStack {
                layers,
                mode: cfg.mode.direction(),
                leaky_slope: cfg.leaky_slope,
            },
            projection: ProjectionParams {
                w_intra_th: fetch("projection.w_intra_th".into(), width, cfg.d1)?,
                w_intra_st: fetch("projection.w_intra_st".into(), width, cfg.d2)?,
                thing_classifier: LinearHead::new(
                    fetch("thing_head.weight".into(), cfg.n_dim + cfg.d1, cfg.thing_classes)?,
                    fetch("thing_head.bias".into(), 1, cfg.thing_classes)?,
                )?,
                stuff_classifier: LinearHead::new(
                    fetch("stuff_head.weight".into(), cfg.n_dim + cfg.d2, cfg.stuff_classes)?,
                    fetch("stuff_head.bias".into(), 1, cfg.stuff_classes)?,
                )?,
            },
        })
    }
}

/// Tape handles for every parameter, in the same order as
/// [`PipelineParams::named`].
#[derive(Debug, Clone)]
pub struct ParamVars {
    pub layers: Vec<LayerVars>,
    pub w_intra_th: Var,
    pub w_intra_st: Var,
    pub thing_w: Var,
    pub thing_b: Var,
    pub stuff_w: Var,
    pub stuff_b: Var,
}

impl ParamVars {
    /// Registration order matches [`PipelineParams::named`].
    pub fn ordered(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for layer in &self.layers {
            out.push(layer.w_th);
            out.push(layer.w_st);
            out.extend(layer.heads.iter().copied());
        }
        out.extend([
            self.w_intra_th,
            self.w_intra_st,
            self.thing_w,
            self.thing_b,
            self.stuff_w,
            self.stuff_b,
        ]);
        out
    }

    /// Rebuild the structure from handles laid out in [`Self::ordered`]
    /// order (used when parameters arrive as gradcheck inputs).
    pub fn from_ordered(cfg: &PipelineConfig, vars: &[Var]) -> Result<ParamVars> {
        let expected = cfg.t_layers * (2 + cfg.heads) + 6;
        if vars.len() != expected {
            return Err(Error::Config(format!(
                "expected {expected} parameter handles, got {}",
                vars.len()
            )));
        }
        let mut it = vars.iter().copied();
        let mut layers = Vec::with_capacity(cfg.t_layers);
        for _ in 0..cfg.t_layers {
            let w_th = it.next().unwrap();
            let w_st = it.next().unwrap();
            let heads = (0..cfg.heads).map(|_| it.next().unwrap()).collect();
            layers.push(LayerVars { w_th, w_st, heads });
        }
        Ok(ParamVars {
            layers,
            w_intra_th: it.next().unwrap(),
            w_intra_st: it.next().unwrap(),
            thing_w: it.next().unwrap(),
            thing_b: it.next().unwrap(),
            stuff_w: it.next().unwrap(),
            stuff_b: it.next().unwrap(),
        })
    }

    pub fn register(params: &PipelineParams, tape: &mut Tape, trainable: bool) -> ParamVars {
        let mut reg = |m: &Mat| {
            if trainable {
                tape.leaf(m.clone())
            } else {
                tape.constant(m.clone())
            }
        };
        let layers = params
            .reasoning
            .layers
            .iter()
            .map(|l| LayerVars {
                w_th: reg(&l.w_th),
                w_st: reg(&l.w_st),
                heads: l.heads.iter().map(|h| reg(&h.w_pair)).collect(),
            })
            .collect();
        ParamVars {
            layers,
            w_intra_th: reg(&params.projection.w_intra_th),
            w_intra_st: reg(&params.projection.w_intra_st),
            thing_w: reg(&params.projection.thing_classifier.weight),
            thing_b: reg(&params.projection.thing_classifier.bias),
            stuff_w: reg(&params.projection.stuff_classifier.weight),
            stuff_b: reg(&params.projection.stuff_classifier.bias),
        }
    }
}

/// Raw inputs for one scene's forward pass.
#[derive(Debug, Clone)]
pub struct SceneInputs {
    /// |V_th| × N pooled proposal features; zero rows when no proposals
    /// survive (the pipeline then degrades to stuff-only reasoning).
    pub thing_features: Mat,
    pub features: FeatureMap,
    pub scores: ScoreMap,
    /// Per-node embeddings for cosine mode: (|V_th| + |V_st|) rows.
    pub node_embeddings: Option<Mat>,
}

/// Input handles on the tape.
#[derive(Debug, Clone, Copy)]
pub struct InputVars {
    pub thing_features: Var,
    /// N × HW feature matrix.
    pub features: Var,
    /// HW × |V_st| score logits.
    pub scores: Var,
}

impl InputVars {
    pub fn register(inputs: &SceneInputs, tape: &mut Tape, trainable: bool) -> InputVars {
        let mut reg = |m: Mat| {
            if trainable {
                tape.leaf(m)
            } else {
                tape.constant(m)
            }
        };
        InputVars {
            thing_features: reg(inputs.thing_features.clone()),
            features: reg(inputs.features.to_mat()),
            scores: reg(inputs.scores.to_mat()),
        }
    }
}

/// Output handles of the assembled forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    pub thing_logits: Var,
    /// HW × |V_st| refined stuff logits.
    pub refined_logits: Var,
    pub a_th: Var,
    pub f_th: Var,
    pub f_st: Var,
}

/// Build the full forward pass on `tape`.
pub fn build_forward(
    tape: &mut Tape,
    cfg: &PipelineConfig,
    inputs: InputVars,
    params: &ParamVars,
    node_embeddings: Option<&Mat>,
) -> Result<ForwardVars> {
    let n_th = tape.value(inputs.thing_features).rows();
    let hw = tape.value(inputs.features).cols();
    let mode = cfg.mode;

    // Graph node features per branch; an absent graph is an empty partition.
    let graph_th = if mode.has_thing_graph() {
        inputs.thing_features
    } else {
        tape.constant(Mat::zeros(0, cfg.n_dim))
    };
    let graph_st = if mode.has_stuff_graph() {
        class_centers_on_tape(tape, inputs.features, inputs.scores)?
    } else {
        tape.constant(Mat::zeros(0, cfg.n_dim))
    };

    // In cosine mode the embeddings cover the joint graph that actually runs.
    let embeddings_for_run = node_embeddings;

    let reasoned = run_reasoning_on_tape(
        tape,
        graph_th,
        graph_st,
        &params.layers,
        mode.direction(),
        cfg.leaky_slope,
        embeddings_for_run,
    )?;

    let f_th = if mode.has_thing_graph() {
        project_things_on_tape(tape, reasoned.x_th, reasoned.a_th_final, params.w_intra_th)?
    } else {
        tape.constant(Mat::zeros(n_th, cfg.d1))
    };
    let f_st = if mode.has_stuff_graph() {
        project_stuff_on_tape(tape, inputs.scores, reasoned.x_st, params.w_intra_st)?
    } else {
        tape.constant(Mat::zeros(hw, cfg.d2))
    };

    let thing_logits =
        classify_regions_on_tape(tape, inputs.thing_features, f_th, params.thing_w, params.thing_b)?;
    let pixel_features = tape.transpose(inputs.features);
    let refined_logits =
        segment_pixels_on_tape(tape, pixel_features, f_st, params.stuff_w, params.stuff_b)?;

    Ok(ForwardVars {
        thing_logits,
        refined_logits,
        a_th: reasoned.a_th_final,
        f_th,
        f_st,
    })
}

/// Mean cross-entropy between row logits and one-hot targets; zero for an
/// empty batch.
pub fn cross_entropy_mean_on_tape(tape: &mut Tape, logits: Var, onehot: Var) -> Result<Var> {
    let rows = tape.value(logits).rows();
    if rows == 0 {
        return Ok(tape.constant(Mat::zeros(1, 1)));
    }
    if tape.value(onehot).shape() != tape.value(logits).shape() {
        return Err(Error::shape(
            "cross_entropy",
            tape.value(logits).shape_str(),
            tape.value(onehot).shape_str(),
        ));
    }
    let log_probs = tape.log_softmax_rows(logits);
    let picked = tape.mul_elem(log_probs, onehot)?;
    let total = tape.sum_all(picked);
    Ok(tape.scale(total, -1.0 / rows as f64))
}

/// One-hot encode integer labels.
pub fn one_hot(labels: &[usize], classes: usize) -> Result<Mat> {
    let mut m = Mat::zeros(labels.len(), classes);
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::Config(format!(
                "label {l} out of range for {classes} classes"
            )));
        }
        m.set(i, l, 1.0);
    }
    Ok(m)
}

/// Plain-value outputs of a non-training forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub thing_logits: Mat,
    pub refined: ScoreMap,
    pub a_th: Mat,
}

/// Run the forward pass with constant inputs and parameters.
pub fn forward(
    cfg: &PipelineConfig,
    params: &PipelineParams,
    inputs: &SceneInputs,
) -> Result<ForwardOutput> {
    let mut tape = Tape::new();
    let input_vars = InputVars::register(inputs, &mut tape, false);
    let param_vars = ParamVars::register(params, &mut tape, false);
    let out = build_forward(
        &mut tape,
        cfg,
        input_vars,
        &param_vars,
        inputs.node_embeddings.as_ref(),
    )?;
    Ok(ForwardOutput {
        thing_logits: tape.value(out.thing_logits).clone(),
        refined: ScoreMap::from_mat(
            tape.value(out.refined_logits),
            inputs.features.height(),
            inputs.features.width(),
        )?,
        a_th: tape.value(out.a_th).clone(),
    })
}
