//! Joint thing/stuff graph reasoning.
//!
//! The thing nodes and stuff nodes are stacked into one joint feature matrix.
//! A multi-head attention mechanism scores every ordered node pair, a
//! direction mask restricts which blocks of the joint adjacency are active,
//! and each reasoning layer concatenates the propagated features back onto
//! the node features, growing their width by `D0` per layer.
//!
//! Block layout of the joint adjacency (row = receiver, column = sender):
//!
//! ```text
//!         things cols   stuff cols
//! things [   A_th      |   A_s-t   ]
//! stuff  [   A_t-s     |   A_st    ]
//! ```

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graphs::cosine_adjacency;
use crate::tensor::{ops, Mask, Mat, Tape, Var};

/// Which cross-branch blocks of the joint adjacency are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DirectionMode {
    /// Both cross blocks active.
    Bidirectional,
    /// Things enhance stuff only: the stuff-to-thing block is masked.
    ThingToStuff,
    /// Stuff enhances things only: the thing-to-stuff block is masked.
    StuffToThing,
    /// Both cross blocks masked; each branch reasons on its own.
    Disconnected,
    /// Attention replaced by a fixed cosine-similarity adjacency computed
    /// from external per-node embeddings.
    Cosine,
}

impl DirectionMode {
    pub fn name(self) -> &'static str {
        match self {
            DirectionMode::Bidirectional => "bidirectional",
            DirectionMode::ThingToStuff => "thing-to-stuff",
            DirectionMode::StuffToThing => "stuff-to-thing",
            DirectionMode::Disconnected => "disconnected",
            DirectionMode::Cosine => "cosine",
        }
    }
}

/// Attention mask for a joint graph with the given partition: forbidden
/// cross blocks are excluded from the row softmax entirely.
pub fn direction_mask(mode: DirectionMode, n_thing: usize, n_stuff: usize) -> Mask {
    let n = n_thing + n_stuff;
    let mut mask = Mask::all_allowed(n, n);
    match mode {
        DirectionMode::Bidirectional | DirectionMode::Cosine => {}
        DirectionMode::ThingToStuff => {
            // Things must not receive from stuff.
            mask.forbid_block(0..n_thing, n_thing..n);
        }
        DirectionMode::StuffToThing => {
            // Stuff must not receive from things.
            mask.forbid_block(n_thing..n, 0..n_thing);
        }
        DirectionMode::Disconnected => {
            mask.forbid_block(0..n_thing, n_thing..n);
            mask.forbid_block(n_thing..n, 0..n_thing);
        }
    }
    mask
}

/// One attention head: maps a concatenated node pair (length 2d) to a logit.
#[derive(Debug, Clone)]
pub struct AttentionHead {
    pub w_pair: Mat,
}

impl AttentionHead {
    pub fn new(w_pair: Mat) -> Result<Self> {
        if w_pair.rows() != 1 || w_pair.cols() % 2 != 0 {
            return Err(Error::shape(
                "AttentionHead::new",
                "1x2d pair weight",
                w_pair.shape_str(),
            ));
        }
        Ok(AttentionHead { w_pair })
    }
}

/// Trainable parameters of one reasoning layer.
#[derive(Debug, Clone)]
pub struct ReasoningLayerParams {
    pub w_th: Mat,
    pub w_st: Mat,
    pub heads: Vec<AttentionHead>,
}

impl ReasoningLayerParams {
    pub fn validate(&self, d_in: usize) -> Result<()> {
        if self.w_th.shape() != self.w_st.shape() {
            return Err(Error::shape(
                "ReasoningLayerParams",
                self.w_th.shape_str(),
                self.w_st.shape_str(),
            ));
        }
        if self.w_th.rows() != d_in {
            return Err(Error::shape(
                "ReasoningLayerParams",
                format!("input width {d_in}"),
                self.w_th.shape_str(),
            ));
        }
        for (i, h) in self.heads.iter().enumerate() {
            if h.w_pair.shape() != (1, 2 * d_in) {
                return Err(Error::shape(
                    "ReasoningLayerParams",
                    format!("head {i} expects 1x{}", 2 * d_in),
                    h.w_pair.shape_str(),
                ));
            }
        }
        Ok(())
    }

    pub fn d_out(&self) -> usize {
        self.w_th.cols()
    }

    pub fn random_init(d_in: usize, d_out: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        ReasoningLayerParams {
            w_th: Mat::random_uniform(d_in, d_out, -scale, scale, rng),
            w_st: Mat::random_uniform(d_in, d_out, -scale, scale, rng),
            heads: (0..heads)
                .map(|_| AttentionHead {
                    w_pair: Mat::random_uniform(1, 2 * d_in, -scale, scale, rng),
                })
                .collect(),
        }
    }
}

/// The full reasoning configuration: `T` layers with per-layer parameters
/// (node width grows by `d0` per layer, so each layer owns its own shapes).
#[derive(Debug, Clone)]
pub struct ReasoningStack {
    pub layers: Vec<ReasoningLayerParams>,
    pub mode: DirectionMode,
    pub leaky_slope: f64,
}

impl ReasoningStack {
    /// Layer widths for `t` layers starting from input width `n_dim` with
    /// growth `d0`: layer k sees width `n_dim + k*d0`.
    pub fn random_init(
        n_dim: usize,
        d0: usize,
        t_layers: usize,
        heads: usize,
        mode: DirectionMode,
        leaky_slope: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if t_layers == 0 {
            return Err(Error::Config("reasoning needs at least one layer".into()));
        }
        ops::check_leaky_slope(leaky_slope)?;
        let layers = (0..t_layers)
            .map(|k| ReasoningLayerParams::random_init(n_dim + k * d0, d0, heads, rng))
            .collect();
        Ok(ReasoningStack {
            layers,
            mode,
            leaky_slope,
        })
    }

    pub fn t_layers(&self) -> usize {
        self.layers.len()
    }
}

/// Joint graph state: stacked node features with the partition index and a
/// row-stochastic adjacency.
#[derive(Debug, Clone)]
pub struct JointGraph {
    pub features: Mat,
    pub n_thing: usize,
    pub n_stuff: usize,
    pub adjacency: Mat,
}

impl JointGraph {
    pub fn new(features: Mat, n_thing: usize, adjacency: Mat) -> Result<Self> {
        let n = features.rows();
        if n_thing > n {
            return Err(Error::Config(format!(
                "partition index {n_thing} exceeds {n} nodes"
            )));
        }
        if adjacency.shape() != (n, n) {
            return Err(Error::shape(
                "JointGraph::new",
                format!("{n}x{n} adjacency"),
                adjacency.shape_str(),
            ));
        }
        for r in 0..n {
            let sum: f64 = adjacency.row(r).iter().sum();
            if (sum - 1.0).abs() > 1e-10 {
                return Err(Error::Config(format!(
                    "adjacency row {r} sums to {sum}, expected 1"
                )));
            }
        }
        Ok(JointGraph {
            features,
            n_thing,
            n_stuff: n - n_thing,
            adjacency,
        })
    }

    pub fn n(&self) -> usize {
        self.n_thing + self.n_stuff
    }
}

/// The four adjacency blocks `(A_th, A_s-t, A_t-s, A_st)` in the layout
/// documented at module level.
pub fn split_blocks(g: &JointGraph) -> (Mat, Mat, Mat, Mat) {
    let (k, n) = (g.n_thing, g.n());
    let a = &g.adjacency;
    let a_th = block(a, 0, k, 0, k);
    let a_s_t = block(a, 0, k, k, n);
    let a_t_s = block(a, k, n, 0, k);
    let a_st = block(a, k, n, k, n);
    (a_th, a_s_t, a_t_s, a_st)
}

fn block(a: &Mat, r0: usize, r1: usize, c0: usize, c1: usize) -> Mat {
    let rows = ops::slice_rows(a, r0, r1).expect("row range valid");
    ops::slice_cols(&rows, c0, c1).expect("col range valid")
}

/// Reassemble the four blocks; inverse of [`split_blocks`].
pub fn assemble_blocks(a_th: &Mat, a_s_t: &Mat, a_t_s: &Mat, a_st: &Mat) -> Result<Mat> {
    let top = ops::concat_cols(a_th, a_s_t)?;
    let bottom = ops::concat_cols(a_t_s, a_st)?;
    ops::concat_rows(&top, &bottom)
}

/// Cross-branch transfer: propagate thing features into stuff nodes through
/// the transfer block, `X_{t-s} = A_{t-s} · X_th · W_st`.
pub fn connect_thing_to_stuff(x_th: &Mat, a_t_s: &Mat, w_st: &Mat) -> Result<Mat> {
    let mixed = ops::matmul(a_t_s, x_th)?;
    ops::matmul(&mixed, w_st)
}

/// Multi-head attention adjacency over a joint feature matrix on a tape.
///
/// Per head, the pair logit is `LeakyReLU(w_pair · [x_i ‖ x_j])`; masked
/// entries are excluded from the row softmax; the head matrices are averaged,
/// which keeps the result row-stochastic.
pub fn attention_adjacency_on_tape(
    tape: &mut Tape,
    x_hat: Var,
    head_pair_weights: &[Var],
    mask: Rc<Mask>,
    leaky_slope: f64,
) -> Result<Var> {
    if head_pair_weights.is_empty() {
        return Err(Error::Config("attention needs at least one head".into()));
    }
    let (n, d) = tape.value(x_hat).shape();
    if mask.shape() != (n, n) {
        return Err(Error::shape(
            "attention_adjacency",
            format!("{n}x{n} mask"),
            format!("{}x{}", mask.rows(), mask.cols()),
        ));
    }
    let ones_row = tape.constant(Mat::ones(1, n));
    let ones_col = tape.constant(Mat::ones(n, 1));
    let mut averaged: Option<Var> = None;
    let head_weight = 1.0 / head_pair_weights.len() as f64;
    for &w_pair in head_pair_weights {
        if tape.value(w_pair).shape() != (1, 2 * d) {
            return Err(Error::shape(
                "attention_adjacency",
                format!("1x{} pair weight", 2 * d),
                tape.value(w_pair).shape_str(),
            ));
        }
        // logit(i,j) = lrelu(w_a·x_i + w_b·x_j), assembled as an outer sum.
        let w_a = tape.slice_cols(w_pair, 0, d)?;
        let w_b = tape.slice_cols(w_pair, d, 2 * d)?;
        let w_a_t = tape.transpose(w_a);
        let w_b_t = tape.transpose(w_b);
        let a_scores = tape.matmul(x_hat, w_a_t)?;
        let b_scores = tape.matmul(x_hat, w_b_t)?;
        let a_grid = tape.matmul(a_scores, ones_row)?;
        let b_scores_t = tape.transpose(b_scores);
        let b_grid = tape.matmul(ones_col, b_scores_t)?;
        let pre = tape.add(a_grid, b_grid)?;
        let logits = tape.leaky_relu(pre, leaky_slope)?;
        let probs = tape.masked_softmax_rows(logits, Rc::clone(&mask))?;
        averaged = Some(match averaged {
            None => tape.scale(probs, head_weight),
            Some(acc) => tape.scale_add(acc, probs, 1.0, head_weight)?,
        });
    }
    Ok(averaged.expect("at least one head"))
}

/// Pure wrapper over [`attention_adjacency_on_tape`].
pub fn attention_adjacency(
    x_hat: &Mat,
    heads: &[AttentionHead],
    mask: &Mask,
    leaky_slope: f64,
) -> Result<Mat> {
    let mut tape = Tape::new();
    let x = tape.constant(x_hat.clone());
    let head_vars: Vec<Var> = heads
        .iter()
        .map(|h| tape.constant(h.w_pair.clone()))
        .collect();
    let adj = attention_adjacency_on_tape(&mut tape, x, &head_vars, Rc::new(mask.clone()), leaky_slope)?;
    Ok(tape.value(adj).clone())
}

/// One reasoning layer over a pre-built joint graph:
/// `X̃ = X̂ ⊕ σ(Â · (X̂ ⊗ Ŵ))` where `⊗` applies `w_th` to thing rows and
/// `w_st` to stuff rows. Output width is `d_in + d_out`.
pub fn reasoning_layer(g: &JointGraph, p: &ReasoningLayerParams) -> Result<Mat> {
    p.validate(g.features.cols())?;
    let x_th = ops::slice_rows(&g.features, 0, g.n_thing)?;
    let x_st = ops::slice_rows(&g.features, g.n_thing, g.n())?;
    let z = ops::concat_rows(&ops::matmul(&x_th, &p.w_th)?, &ops::matmul(&x_st, &p.w_st)?)?;
    let mixed = ops::matmul(&g.adjacency, &z)?;
    ops::concat_cols(&g.features, &ops::relu(&mixed))
}

/// Per-layer parameter handles on a tape.
#[derive(Debug, Clone)]
pub struct LayerVars {
    pub w_th: Var,
    pub w_st: Var,
    pub heads: Vec<Var>,
}

/// Output handles of [`run_reasoning_on_tape`].
#[derive(Debug, Clone, Copy)]
pub struct ReasoningVars {
    pub x_th: Var,
    pub x_st: Var,
    /// Thing-thing block of the final layer's adjacency.
    pub a_th_final: Var,
}

/// Run `T` reasoning layers on a tape, recomputing attention per layer from
/// the current (grown) node features. In cosine mode the fixed adjacency is
/// used at every layer instead of attention.
pub fn run_reasoning_on_tape(
    tape: &mut Tape,
    x_th: Var,
    x_st: Var,
    layers: &[LayerVars],
    mode: DirectionMode,
    leaky_slope: f64,
    node_embeddings: Option<&Mat>,
) -> Result<ReasoningVars> {
    if layers.is_empty() {
        return Err(Error::Config("reasoning needs at least one layer".into()));
    }
    let n_thing = tape.value(x_th).rows();
    let n_stuff = tape.value(x_st).rows();
    let n = n_thing + n_stuff;
    let mask = Rc::new(direction_mask(mode, n_thing, n_stuff));
    let cosine_const = match mode {
        DirectionMode::Cosine => {
            let emb = node_embeddings.ok_or_else(|| {
                Error::Config("cosine mode requires per-node embeddings".into())
            })?;
            if emb.rows() != n {
                return Err(Error::shape(
                    "run_reasoning",
                    format!("{n} node embeddings"),
                    emb.shape_str(),
                ));
            }
            Some(tape.constant(cosine_adjacency(emb)?))
        }
        _ => None,
    };

    let (mut cur_th, mut cur_st) = (x_th, x_st);
    let mut a_th_final = None;
    for (idx, layer) in layers.iter().enumerate() {
        let d_in = tape.value(cur_th).cols();
        if tape.value(cur_st).cols() != d_in {
            return Err(Error::shape(
                "run_reasoning",
                format!("thing width {d_in}"),
                format!("stuff width {}", tape.value(cur_st).cols()),
            ));
        }
        if tape.value(layer.w_th).rows() != d_in {
            return Err(Error::Checkpoint(format!(
                "layer {idx} weight expects input width {}, graph has {d_in}",
                tape.value(layer.w_th).rows()
            )));
        }
        let x_hat = tape.concat_rows(cur_th, cur_st)?;
        let adj = match cosine_const {
            Some(c) => c,
            None => {
                attention_adjacency_on_tape(tape, x_hat, &layer.heads, Rc::clone(&mask), leaky_slope)?
            }
        };
        let zw_th = tape.matmul(cur_th, layer.w_th)?;
        let zw_st = tape.matmul(cur_st, layer.w_st)?;
        let z = tape.concat_rows(zw_th, zw_st)?;
        let mixed = tape.matmul(adj, z)?;
        let activated = tape.relu(mixed);
        let x_new = tape.concat_cols(x_hat, activated)?;
        cur_th = tape.slice_rows(x_new, 0, n_thing)?;
        cur_st = tape.slice_rows(x_new, n_thing, n)?;
        if idx + 1 == layers.len() {
            let left_cols = tape.slice_cols(adj, 0, n_thing)?;
            a_th_final = Some(tape.slice_rows(left_cols, 0, n_thing)?);
        }
    }
    Ok(ReasoningVars {
        x_th: cur_th,
        x_st: cur_st,
        a_th_final: a_th_final.expect("layers nonempty"),
    })
}

/// Reasoned features and the final thing-thing attention block.
#[derive(Debug, Clone)]
pub struct ReasoningOutput {
    pub x_th: Mat,
    pub x_st: Mat,
    pub a_th_final: Mat,
}

/// Pure wrapper over [`run_reasoning_on_tape`].
pub fn run_reasoning(
    x_th: &Mat,
    x_st: &Mat,
    stack: &ReasoningStack,
    node_embeddings: Option<&Mat>,
) -> Result<ReasoningOutput> {
    let mut tape = Tape::new();
    let th = tape.constant(x_th.clone());
    let st = tape.constant(x_st.clone());
    let layer_vars: Vec<LayerVars> = stack
        .layers
        .iter()
        .map(|l| LayerVars {
            w_th: tape.constant(l.w_th.clone()),
            w_st: tape.constant(l.w_st.clone()),
            heads: l.heads.iter().map(|h| tape.constant(h.w_pair.clone())).collect(),
        })
        .collect();
    let out = run_reasoning_on_tape(
        &mut tape,
        th,
        st,
        &layer_vars,
        stack.mode,
        stack.leaky_slope,
        node_embeddings,
    )?;
    Ok(ReasoningOutput {
        x_th: tape.value(out.x_th).clone(),
        x_st: tape.value(out.x_st).clone(),
        a_th_final: tape.value(out.a_th_final).clone(),
    })
}
