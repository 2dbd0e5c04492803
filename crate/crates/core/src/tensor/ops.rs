//! Forward and backward kernels for every tensor operation.
//!
//! Each forward function validates shapes and returns a fresh `Mat`; each
//! `*_backward` maps the upstream gradient (same shape as the op output) to
//! gradients with the shapes of the inputs. Backward functions assume the
//! shapes already passed the forward validation.

use crate::error::{Error, Result};
use crate::tensor::mat::{Mask, Mat};

/// Axis along which a softmax normalizes: `Rows` makes every row sum to 1,
/// `Cols` makes every column sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Rows,
    Cols,
}

// ---------------------------------------------------------------------------
// matmul
// ---------------------------------------------------------------------------

pub fn matmul(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.rows() {
        return Err(Error::shape("matmul", a.shape_str(), b.shape_str()));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Mat::zeros(m, n);
    for i in 0..m {
        let arow = a.row(i);
        for t in 0..k {
            let av = arow[t];
            if av == 0.0 {
                continue;
            }
            let brow = b.row(t);
            let orow = out.row_mut(i);
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Ok(out)
}

pub fn matmul_backward(a: &Mat, b: &Mat, upstream: &Mat) -> (Mat, Mat) {
    // dA = U . B^T, dB = A^T . U
    let bt = transpose(b);
    let at = transpose(a);
    let da = matmul(upstream, &bt).expect("shapes fixed by forward");
    let db = matmul(&at, upstream).expect("shapes fixed by forward");
    (da, db)
}

// ---------------------------------------------------------------------------
// transpose
// ---------------------------------------------------------------------------

pub fn transpose(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.cols(), a.rows());
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            out.set(c, r, a.get(r, c));
        }
    }
    out
}

pub fn transpose_backward(upstream: &Mat) -> Mat {
    transpose(upstream)
}

// ---------------------------------------------------------------------------
// scale_add: alpha*A + beta*B
// ---------------------------------------------------------------------------

pub fn scale_add(a: &Mat, b: &Mat, alpha: f64, beta: f64) -> Result<Mat> {
    a.zip_map(b, "scale_add", |x, y| alpha * x + beta * y)
}

pub fn scale_add_backward(alpha: f64, beta: f64, upstream: &Mat) -> (Mat, Mat) {
    (upstream.map(|u| alpha * u), upstream.map(|u| beta * u))
}

// ---------------------------------------------------------------------------
// concatenation and slicing
// ---------------------------------------------------------------------------

pub fn concat_cols(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.rows() != b.rows() {
        return Err(Error::shape("concat_cols", a.shape_str(), b.shape_str()));
    }
    let (rows, ac, bc) = (a.rows(), a.cols(), b.cols());
    let mut data = Vec::with_capacity(rows * (ac + bc));
    for r in 0..rows {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    Mat::new(rows, ac + bc, data)
}

pub fn concat_cols_backward(a_cols: usize, upstream: &Mat) -> (Mat, Mat) {
    let da = slice_cols(upstream, 0, a_cols).expect("split point valid");
    let db = slice_cols(upstream, a_cols, upstream.cols()).expect("split point valid");
    (da, db)
}

pub fn concat_rows(a: &Mat, b: &Mat) -> Result<Mat> {
    if a.cols() != b.cols() {
        return Err(Error::shape("concat_rows", a.shape_str(), b.shape_str()));
    }
    let mut data = Vec::with_capacity((a.rows() + b.rows()) * a.cols());
    data.extend_from_slice(a.as_slice());
    data.extend_from_slice(b.as_slice());
    Mat::new(a.rows() + b.rows(), a.cols(), data)
}

pub fn concat_rows_backward(a_rows: usize, upstream: &Mat) -> (Mat, Mat) {
    let da = slice_rows(upstream, 0, a_rows).expect("split point valid");
    let db = slice_rows(upstream, a_rows, upstream.rows()).expect("split point valid");
    (da, db)
}

/// Columns `[lo, hi)` of `a`.
pub fn slice_cols(a: &Mat, lo: usize, hi: usize) -> Result<Mat> {
    if lo > hi || hi > a.cols() {
        return Err(Error::shape(
            "slice_cols",
            a.shape_str(),
            format!("columns [{lo},{hi})"),
        ));
    }
    let mut data = Vec::with_capacity(a.rows() * (hi - lo));
    for r in 0..a.rows() {
        data.extend_from_slice(&a.row(r)[lo..hi]);
    }
    Mat::new(a.rows(), hi - lo, data)
}

pub fn slice_cols_backward(src_cols: usize, lo: usize, upstream: &Mat) -> Mat {
    let mut out = Mat::zeros(upstream.rows(), src_cols);
    for r in 0..upstream.rows() {
        for c in 0..upstream.cols() {
            out.set(r, lo + c, upstream.get(r, c));
        }
    }
    out
}

/// Rows `[lo, hi)` of `a`.
pub fn slice_rows(a: &Mat, lo: usize, hi: usize) -> Result<Mat> {
    if lo > hi || hi > a.rows() {
        return Err(Error::shape(
            "slice_rows",
            a.shape_str(),
            format!("rows [{lo},{hi})"),
        ));
    }
    let data = a.as_slice()[lo * a.cols()..hi * a.cols()].to_vec();
    Mat::new(hi - lo, a.cols(), data)
}

pub fn slice_rows_backward(src_rows: usize, lo: usize, upstream: &Mat) -> Mat {
    let mut out = Mat::zeros(src_rows, upstream.cols());
    for r in 0..upstream.rows() {
        for c in 0..upstream.cols() {
            out.set(lo + r, c, upstream.get(r, c));
        }
    }
    out
}

// ---------------------------------------------------------------------------
// pointwise nonlinearities
// ---------------------------------------------------------------------------

pub fn relu(a: &Mat) -> Mat {
    a.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn relu_backward(input: &Mat, upstream: &Mat) -> Mat {
    input
        .zip_map(upstream, "relu_backward", |x, u| if x > 0.0 { u } else { 0.0 })
        .expect("shapes fixed by forward")
}

pub fn leaky_relu(a: &Mat, slope: f64) -> Result<Mat> {
    check_leaky_slope(slope)?;
    Ok(a.map(|x| if x >= 0.0 { x } else { slope * x }))
}

pub fn leaky_relu_backward(input: &Mat, slope: f64, upstream: &Mat) -> Mat {
    input
        .zip_map(upstream, "leaky_relu_backward", |x, u| {
            if x >= 0.0 {
                u
            } else {
                slope * u
            }
        })
        .expect("shapes fixed by forward")
}

pub fn check_leaky_slope(slope: f64) -> Result<()> {
    if !(slope > 0.0 && slope < 1.0) {
        return Err(Error::Config(format!(
            "leaky_relu slope must lie in (0,1), got {slope}"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// softmax family
// ---------------------------------------------------------------------------

/// Softmax along the chosen axis, stabilized by max-subtraction.
pub fn softmax_axis(a: &Mat, axis: Axis) -> Mat {
    match axis {
        Axis::Rows => softmax_rows(a),
        Axis::Cols => transpose(&softmax_rows(&transpose(a))),
    }
}

pub fn softmax_axis_backward(output: &Mat, axis: Axis, upstream: &Mat) -> Mat {
    match axis {
        Axis::Rows => softmax_rows_backward(output, upstream),
        Axis::Cols => transpose(&softmax_rows_backward(
            &transpose(output),
            &transpose(upstream),
        )),
    }
}

fn softmax_rows(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let row = a.row(r);
        if row.is_empty() {
            continue;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let orow = out.row_mut(r);
        let mut sum = 0.0;
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = (x - max).exp();
            sum += *o;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    out
}

/// `dX[i][j] = P[i][j] * (U[i][j] - sum_k U[i][k] * P[i][k])`
fn softmax_rows_backward(output: &Mat, upstream: &Mat) -> Mat {
    let mut out = Mat::zeros(output.rows(), output.cols());
    for r in 0..output.rows() {
        let p = output.row(r);
        let u = upstream.row(r);
        let dot: f64 = p.iter().zip(u).map(|(&pi, &ui)| pi * ui).sum();
        let orow = out.row_mut(r);
        for j in 0..p.len() {
            orow[j] = p[j] * (u[j] - dot);
        }
    }
    out
}

/// Row softmax restricted to `mask`-allowed entries. Masked entries get
/// exactly zero probability and receive zero gradient. A fully masked row of
/// a square matrix falls back to a one-hot self-loop (and is logged); the
/// fallback row is a constant with zero gradient.
pub fn masked_softmax_rows(a: &Mat, mask: &Mask) -> Result<Mat> {
    if a.shape() != mask.shape() {
        return Err(Error::shape(
            "masked_softmax_rows",
            a.shape_str(),
            format!("mask {}x{}", mask.rows(), mask.cols()),
        ));
    }
    let mut out = Mat::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let row = a.row(r);
        let max = (0..row.len())
            .filter(|&c| mask.is_allowed(r, c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            // Fully masked row: self-loop keeps the matrix row-stochastic.
            if r >= a.cols() {
                return Err(Error::Config(format!(
                    "fully masked row {r} has no self-loop in a {} matrix",
                    a.shape_str()
                )));
            }
            log::warn!("attention row {r} fully masked; falling back to self-loop");
            out.set(r, r, 1.0);
            continue;
        }
        let mut sum = 0.0;
        for c in 0..row.len() {
            if mask.is_allowed(r, c) {
                let e = (row[c] - max).exp();
                out.set(r, c, e);
                sum += e;
            }
        }
        for c in 0..row.len() {
            if mask.is_allowed(r, c) {
                out.set(r, c, out.get(r, c) / sum);
            }
        }
    }
    Ok(out)
}

/// Same form as the softmax backward: masked entries have P=0, so they drop
/// out of both the row dot product and the gradient. Fallback self-loop rows
/// have P=1 only at the diagonal of a masked column, and `(u - dot)` vanishes
/// there, so they contribute zero gradient as required for a constant row.
pub fn masked_softmax_rows_backward(output: &Mat, mask: &Mask, upstream: &Mat) -> Mat {
    let mut out = Mat::zeros(output.rows(), output.cols());
    for r in 0..output.rows() {
        let p = output.row(r);
        let u = upstream.row(r);
        let dot: f64 = p.iter().zip(u).map(|(&pi, &ui)| pi * ui).sum();
        let orow = out.row_mut(r);
        for j in 0..p.len() {
            if mask.is_allowed(r, j) {
                orow[j] = p[j] * (u[j] - dot);
            }
        }
    }
    out
}

/// Row-wise log-softmax: x - max - ln(sum(exp(x - max))).
pub fn log_softmax_rows(a: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows(), a.cols());
    for r in 0..a.rows() {
        let row = a.row(r);
        if row.is_empty() {
            continue;
        }
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln() + max;
        let orow = out.row_mut(r);
        for (o, &x) in orow.iter_mut().zip(row) {
            *o = x - lse;
        }
    }
    out
}

/// `dX[i][j] = U[i][j] - softmax(X)[i][j] * sum_k U[i][k]`
pub fn log_softmax_rows_backward(output: &Mat, upstream: &Mat) -> Mat {
    let mut out = Mat::zeros(output.rows(), output.cols());
    for r in 0..output.rows() {
        let l = output.row(r);
        let u = upstream.row(r);
        let usum: f64 = u.iter().sum();
        let orow = out.row_mut(r);
        for j in 0..l.len() {
            orow[j] = u[j] - l[j].exp() * usum;
        }
    }
    out
}

// ---------------------------------------------------------------------------
// elementwise product and reduction
// ---------------------------------------------------------------------------

pub fn mul_elem(a: &Mat, b: &Mat) -> Result<Mat> {
    a.zip_map(b, "mul_elem", |x, y| x * y)
}

pub fn mul_elem_backward(a: &Mat, b: &Mat, upstream: &Mat) -> (Mat, Mat) {
    let da = b
        .zip_map(upstream, "mul_elem_backward", |y, u| y * u)
        .expect("shapes fixed by forward");
    let db = a
        .zip_map(upstream, "mul_elem_backward", |x, u| x * u)
        .expect("shapes fixed by forward");
    (da, db)
}

/// Sum of all entries as a 1×1 matrix.
pub fn sum_all(a: &Mat) -> Mat {
    Mat::new(1, 1, vec![a.as_slice().iter().sum()]).expect("1x1")
}

pub fn sum_all_backward(rows: usize, cols: usize, upstream: &Mat) -> Mat {
    Mat::filled(rows, cols, upstream.get(0, 0))
}
