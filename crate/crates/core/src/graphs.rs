//! Graph construction for the two branches.
//!
//! Thing-Graph nodes are the pooled features of detected regions. Stuff-Graph
//! nodes are class centers: per class, a softmax over all pixel scores turns
//! the coarse score map into convex weights, and the class center is the
//! weighted combination of pixel features. The cosine variant builds a fixed
//! adjacency from external per-node embeddings instead of learned attention.

use crate::error::{Error, Result};
use crate::fusion::BitMask;
use crate::tensor::{Axis, Mat, Tape, Var};

/// Backbone features for one image, channel-major (CHW).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl FeatureMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "feature map dims must be >= 1, got {channels}x{height}x{width}"
            )));
        }
        let expect = channels.checked_mul(height).and_then(|n| n.checked_mul(width));
        if expect.is_none_or(|n| data.len() != n) {
            return Err(Error::shape(
                "FeatureMap::new",
                format!("{channels}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(FeatureMap {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, ch: usize, y: usize, x: usize) -> f64 {
        self.data[(ch * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, ch: usize, y: usize, x: usize, v: f64) {
        self.data[(ch * self.height + y) * self.width + x] = v;
    }

    /// Feature vector of one pixel, length `channels`.
    pub fn pixel(&self, y: usize, x: usize) -> Vec<f64> {
        (0..self.channels).map(|ch| self.get(ch, y, x)).collect()
    }

    /// Channels × (H·W) matrix; pixel p = y·W + x.
    pub fn to_mat(&self) -> Mat {
        Mat::new(self.channels, self.height * self.width, self.data.clone()).expect("layout")
    }

    pub fn from_mat(mat: &Mat, height: usize, width: usize) -> Result<Self> {
        if mat.cols() != height * width {
            return Err(Error::shape(
                "FeatureMap::from_mat",
                format!("{height}x{width} pixels"),
                mat.shape_str(),
            ));
        }
        FeatureMap::new(mat.rows(), height, width, mat.as_slice().to_vec())
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// Per-class coarse score logits, channel-major (classes × H × W).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap {
    classes: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl ScoreMap {
    pub fn new(classes: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if classes == 0 || height == 0 || width == 0 {
            return Err(Error::Config(format!(
                "score map dims must be >= 1, got {classes}x{height}x{width}"
            )));
        }
        let expect = classes.checked_mul(height).and_then(|n| n.checked_mul(width));
        if expect.is_none_or(|n| data.len() != n) {
            return Err(Error::shape(
                "ScoreMap::new",
                format!("{classes}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(ScoreMap {
            classes,
            height,
            width,
            data,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn get(&self, class: usize, y: usize, x: usize) -> f64 {
        self.data[(class * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, class: usize, y: usize, x: usize, v: f64) {
        self.data[(class * self.height + y) * self.width + x] = v;
    }

    /// (H·W) × classes matrix; row p = y·W + x.
    pub fn to_mat(&self) -> Mat {
        let hw = self.height * self.width;
        let mut m = Mat::zeros(hw, self.classes);
        for c in 0..self.classes {
            for p in 0..hw {
                m.set(p, c, self.data[c * hw + p]);
            }
        }
        m
    }

    pub fn from_mat(mat: &Mat, height: usize, width: usize) -> Result<Self> {
        if mat.rows() != height * width {
            return Err(Error::shape(
                "ScoreMap::from_mat",
                format!("{height}x{width} pixels"),
                mat.shape_str(),
            ));
        }
        let hw = height * width;
        let classes = mat.cols();
        let mut data = vec![0.0; classes * hw];
        for c in 0..classes {
            for p in 0..hw {
                data[c * hw + p] = mat.get(p, c);
            }
        }
        ScoreMap::new(classes, height, width, data)
    }

    /// Per-pixel argmax class; ties resolve to the lowest class index.
    pub fn argmax_raster(&self) -> Vec<usize> {
        let hw = self.height * self.width;
        (0..hw)
            .map(|p| {
                let mut best = 0usize;
                let mut best_v = self.data[p];
                for c in 1..self.classes {
                    let v = self.data[c * hw + p];
                    if v > best_v {
                        best_v = v;
                        best = c;
                    }
                }
                best
            })
            .collect()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }
}

/// One detected region: pooled feature vector, detection score, optional
/// class prediction and mask.
#[derive(Debug, Clone)]
pub struct Proposal {
    pub feature: Vec<f64>,
    pub score: f64,
    pub class_id: Option<u32>,
    pub mask: Option<BitMask>,
}

/// Per-image proposal list; `|V_th|` is the list length and may be zero.
#[derive(Debug, Clone, Default)]
pub struct RegionSet {
    pub proposals: Vec<Proposal>,
}

impl RegionSet {
    pub fn len(&self) -> usize {
        self.proposals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.proposals.is_empty()
    }
}

/// Stuff-Graph node features (|V_st| × N) with class labels.
#[derive(Debug, Clone)]
pub struct StuffNodeSet {
    pub features: Mat,
    pub class_names: Vec<String>,
}

impl StuffNodeSet {
    pub fn len(&self) -> usize {
        self.features.rows()
    }
}

/// Stack proposal features into the |V_th| × N Thing-Graph node matrix,
/// preserving order.
pub fn build_thing_nodes(regions: &RegionSet) -> Result<Mat> {
    let n = match regions.proposals.first() {
        Some(p) => p.feature.len(),
        None => return Ok(Mat::zeros(0, 0)),
    };
    for (i, p) in regions.proposals.iter().enumerate() {
        if p.feature.len() != n {
            return Err(Error::shape(
                "build_thing_nodes",
                format!("proposal 0 feature length {n}"),
                format!("proposal {i} feature length {}", p.feature.len()),
            ));
        }
    }
    let rows: Vec<Vec<f64>> = regions.proposals.iter().map(|p| p.feature.clone()).collect();
    Mat::from_rows(&rows)
}

/// Class-center extraction on a tape: softmax each class column of the
/// reshaped score map over all pixels, then gather pixel features.
///
/// `features` is N × HW, `scores` is HW × |V_st|; the result is |V_st| × N.
pub fn class_centers_on_tape(tape: &mut Tape, features: Var, scores: Var) -> Result<Var> {
    let f_shape = tape.value(features).shape();
    let s_shape = tape.value(scores).shape();
    if f_shape.1 != s_shape.0 {
        return Err(Error::shape(
            "class_centers",
            format!("features {}x{}", f_shape.0, f_shape.1),
            format!("scores {}x{}", s_shape.0, s_shape.1),
        ));
    }
    let weights = tape.softmax_axis(scores, Axis::Cols);
    let gathered = tape.matmul(features, weights)?;
    Ok(tape.transpose(gathered))
}

/// Pure wrapper over [`class_centers_on_tape`].
pub fn extract_class_centers(features: &FeatureMap, scores: &ScoreMap) -> Result<StuffNodeSet> {
    if features.height() != scores.height() || features.width() != scores.width() {
        return Err(Error::shape(
            "extract_class_centers",
            format!("features {}x{}", features.height(), features.width()),
            format!("scores {}x{}", scores.height(), scores.width()),
        ));
    }
    let mut tape = Tape::new();
    let f = tape.constant(features.to_mat());
    let s = tape.constant(scores.to_mat());
    let centers = class_centers_on_tape(&mut tape, f, s)?;
    let class_names = (0..scores.classes()).map(|c| format!("class_{c}")).collect();
    Ok(StuffNodeSet {
        features: tape.value(centers).clone(),
        class_names,
    })
}

/// Cosine similarity between each pixel feature and one extracted class
/// center, as an H × W raster in [-1, 1]. A zero-norm vector on either side
/// yields similarity 0.
pub fn center_similarity_map(
    features: &FeatureMap,
    centers: &StuffNodeSet,
    class_id: usize,
) -> Result<Mat> {
    if class_id >= centers.len() {
        return Err(Error::Config(format!(
            "class id {class_id} out of range for {} class centers",
            centers.len()
        )));
    }
    if centers.features.cols() != features.channels() {
        return Err(Error::shape(
            "center_similarity_map",
            format!("centers dim {}", centers.features.cols()),
            format!("feature channels {}", features.channels()),
        ));
    }
    let center = centers.features.row(class_id);
    let c_norm = center.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut out = Mat::zeros(features.height(), features.width());
    for y in 0..features.height() {
        for x in 0..features.width() {
            let mut dot = 0.0;
            let mut p_sq = 0.0;
            for ch in 0..features.channels() {
                let v = features.get(ch, y, x);
                dot += v * center[ch];
                p_sq += v * v;
            }
            let denom = p_sq.sqrt() * c_norm;
            out.set(y, x, if denom > 0.0 { dot / denom } else { 0.0 });
        }
    }
    Ok(out)
}

/// Fixed adjacency from per-node embeddings: pairwise cosine similarity with
/// negatives clamped to zero, rows renormalized to sum 1. A row that ends up
/// all-zero (a zero-norm embedding) becomes uniform.
pub fn cosine_adjacency(embeddings: &Mat) -> Result<Mat> {
    let n = embeddings.rows();
    if n == 0 {
        return Err(Error::Config("cosine_adjacency needs at least one node".into()));
    }
    let norms: Vec<f64> = (0..n)
        .map(|i| embeddings.row(i).iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    let mut adj = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let denom = norms[i] * norms[j];
            if denom > 0.0 {
                let dot: f64 = embeddings
                    .row(i)
                    .iter()
                    .zip(embeddings.row(j))
                    .map(|(a, b)| a * b)
                    .sum();
                adj.set(i, j, (dot / denom).max(0.0));
            }
        }
    }
    for i in 0..n {
        let sum: f64 = adj.row(i).iter().sum();
        let row = adj.row_mut(i);
        if sum > 0.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        } else {
            for v in row.iter_mut() {
                *v = 1.0 / n as f64;
            }
        }
    }
    Ok(adj)
}
