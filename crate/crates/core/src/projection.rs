//! Re-projection of reasoned graph features onto visual features.
//!
//! Thing side: the final thing-thing attention block mixes the reasoned
//! node features, a projection matrix adjusts their width, and the result is
//! concatenated to the raw proposal features ahead of the classifier.
//! Stuff side: the same softmax-normalized score weights that built the class
//! centers scatter the reasoned stuff features back to pixels, and a 1×1
//! convolution equivalent produces the refined per-pixel logits.

use crate::error::{Error, Result};
use crate::graphs::{FeatureMap, ScoreMap};
use crate::tensor::{ops, Axis, Mat, Tape, Var};

/// A single linear map with bias; `weight` is (in × out), `bias` is (1 × out).
#[derive(Debug, Clone)]
pub struct LinearHead {
    pub weight: Mat,
    pub bias: Mat,
}

impl LinearHead {
    pub fn new(weight: Mat, bias: Mat) -> Result<Self> {
        if bias.shape() != (1, weight.cols()) {
            return Err(Error::shape(
                "LinearHead::new",
                format!("1x{} bias", weight.cols()),
                bias.shape_str(),
            ));
        }
        Ok(LinearHead { weight, bias })
    }

    pub fn random_init(d_in: usize, d_out: usize, rng: &mut impl rand::Rng) -> Self {
        let scale = 1.0 / (d_in as f64).sqrt();
        LinearHead {
            weight: Mat::random_uniform(d_in, d_out, -scale, scale, rng),
            bias: Mat::zeros(1, d_out),
        }
    }
}

/// Projection weights and the two classification heads.
#[derive(Debug, Clone)]
pub struct ProjectionParams {
    /// (N + T·D0) × D1
    pub w_intra_th: Mat,
    /// (N + T·D0) × D2
    pub w_intra_st: Mat,
    /// (N + D1) → thing classes
    pub thing_classifier: LinearHead,
    /// (N + D2) → stuff classes, applied per pixel
    pub stuff_classifier: LinearHead,
}

impl ProjectionParams {
    pub fn random_init(
        n_dim: usize,
        reasoned_width: usize,
        d1: usize,
        d2: usize,
        thing_classes: usize,
        stuff_classes: usize,
        rng: &mut impl rand::Rng,
    ) -> Self {
        let scale = 1.0 / (reasoned_width as f64).sqrt();
        ProjectionParams {
            w_intra_th: Mat::random_uniform(reasoned_width, d1, -scale, scale, rng),
            w_intra_st: Mat::random_uniform(reasoned_width, d2, -scale, scale, rng),
            thing_classifier: LinearHead::random_init(n_dim + d1, thing_classes, rng),
            stuff_classifier: LinearHead::random_init(n_dim + d2, stuff_classes, rng),
        }
    }
}

/// `f_th = A_th · X̃_th · W_intra_th` on a tape.
pub fn project_things_on_tape(
    tape: &mut Tape,
    x_th_reasoned: Var,
    a_th: Var,
    w_intra_th: Var,
) -> Result<Var> {
    let mixed = tape.matmul(a_th, x_th_reasoned)?;
    tape.matmul(mixed, w_intra_th)
}

/// Pure wrapper over [`project_things_on_tape`].
pub fn project_things(x_th_reasoned: &Mat, a_th: &Mat, params: &ProjectionParams) -> Result<Mat> {
    let mut tape = Tape::new();
    let x = tape.constant(x_th_reasoned.clone());
    let a = tape.constant(a_th.clone());
    let w = tape.constant(params.w_intra_th.clone());
    let out = project_things_on_tape(&mut tape, x, a, w)?;
    Ok(tape.value(out).clone())
}

/// Thing-class logits over `[region_features ‖ f_th]` on a tape.
pub fn classify_regions_on_tape(
    tape: &mut Tape,
    region_features: Var,
    f_th: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let cat = tape.concat_cols(region_features, f_th)?;
    let logits = tape.matmul(cat, weight)?;
    let rows = tape.value(logits).rows();
    let ones = tape.constant(Mat::ones(rows, 1));
    let bias_grid = tape.matmul(ones, bias)?;
    tape.add(logits, bias_grid)
}

/// Pure wrapper over [`classify_regions_on_tape`].
pub fn classify_regions(
    region_features: &Mat,
    f_th: &Mat,
    params: &ProjectionParams,
) -> Result<Mat> {
    let mut tape = Tape::new();
    let r = tape.constant(region_features.clone());
    let f = tape.constant(f_th.clone());
    let w = tape.constant(params.thing_classifier.weight.clone());
    let b = tape.constant(params.thing_classifier.bias.clone());
    let out = classify_regions_on_tape(&mut tape, r, f, w, b)?;
    Ok(tape.value(out).clone())
}

/// `f_st = S̄ · X̃_st · W_intra_st` on a tape, where `S̄` is the reshaped
/// score map softmax-normalized over pixels per class — the same weights
/// used for class-center extraction. `scores` is HW × |V_st|; the result is
/// HW × D2.
pub fn project_stuff_on_tape(
    tape: &mut Tape,
    scores: Var,
    x_st_reasoned: Var,
    w_intra_st: Var,
) -> Result<Var> {
    let weights = tape.softmax_axis(scores, Axis::Cols);
    let gathered = tape.matmul(weights, x_st_reasoned)?;
    tape.matmul(gathered, w_intra_st)
}

/// Pure wrapper over [`project_stuff_on_tape`]; returns a D2 × H × W raster.
pub fn project_stuff(
    x_st_reasoned: &Mat,
    scores: &ScoreMap,
    params: &ProjectionParams,
) -> Result<FeatureMap> {
    if x_st_reasoned.rows() != scores.classes() {
        return Err(Error::shape(
            "project_stuff",
            format!("{} stuff nodes", x_st_reasoned.rows()),
            format!("{} score classes", scores.classes()),
        ));
    }
    let mut tape = Tape::new();
    let s = tape.constant(scores.to_mat());
    let x = tape.constant(x_st_reasoned.clone());
    let w = tape.constant(params.w_intra_st.clone());
    let out = project_stuff_on_tape(&mut tape, s, x, w)?;
    // HW × D2 back to channel-major D2 × H × W.
    let flat = ops::transpose(tape.value(out));
    FeatureMap::from_mat(&flat, scores.height(), scores.width())
}

/// Refined per-pixel stuff logits over `[F ‖ f_st]` on a tape. Both inputs
/// are pixel-major (HW × channels); the result is HW × |V_st|.
pub fn segment_pixels_on_tape(
    tape: &mut Tape,
    pixel_features: Var,
    f_st: Var,
    weight: Var,
    bias: Var,
) -> Result<Var> {
    let cat = tape.concat_cols(pixel_features, f_st)?;
    let logits = tape.matmul(cat, weight)?;
    let rows = tape.value(logits).rows();
    let ones = tape.constant(Mat::ones(rows, 1));
    let bias_grid = tape.matmul(ones, bias)?;
    tape.add(logits, bias_grid)
}

/// Pure wrapper over [`segment_pixels_on_tape`]; the 1×1-convolution
/// equivalent over concatenated channels, returning refined logits.
pub fn segment_pixels(
    features: &FeatureMap,
    f_st: &FeatureMap,
    params: &ProjectionParams,
) -> Result<ScoreMap> {
    if features.height() != f_st.height() || features.width() != f_st.width() {
        return Err(Error::shape(
            "segment_pixels",
            format!("{}x{}", features.height(), features.width()),
            format!("{}x{}", f_st.height(), f_st.width()),
        ));
    }
    if features.channels() + f_st.channels() != params.stuff_classifier.weight.rows() {
        return Err(Error::shape(
            "segment_pixels",
            format!("{} input channels", features.channels() + f_st.channels()),
            format!("{} classifier rows", params.stuff_classifier.weight.rows()),
        ));
    }
    let mut tape = Tape::new();
    let f = tape.constant(ops::transpose(&features.to_mat()));
    let e = tape.constant(ops::transpose(&f_st.to_mat()));
    let w = tape.constant(params.stuff_classifier.weight.clone());
    let b = tape.constant(params.stuff_classifier.bias.clone());
    let out = segment_pixels_on_tape(&mut tape, f, e, w, b)?;
    ScoreMap::from_mat(tape.value(out), features.height(), features.width())
}
