//! Reverse-mode differentiation over an explicit computation record.
//!
//! A `Tape` records every operation as a node holding the operator, the
//! parent handles and the forward value. `backward_from` walks the record in
//! reverse, dispatching the per-operation adjoint kernels from
//! [`crate::tensor::ops`]. A record is single-threaded; run independent
//! records in parallel instead of sharing one.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::mat::{Mask, Mat};
use crate::tensor::ops::{self, Axis};

/// Handle to a node on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    /// Differentiable input (data or parameter).
    Leaf,
    /// Non-differentiable input; receives no gradient.
    Constant,
    MatMul(Var, Var),
    Transpose(Var),
    ScaleAdd(Var, Var, f64, f64),
    ConcatCols(Var, Var),
    ConcatRows(Var, Var),
    SliceCols(Var, usize, usize),
    SliceRows(Var, usize, usize),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softmax(Var, Axis),
    MaskedSoftmaxRows(Var, Rc<Mask>),
    LogSoftmaxRows(Var),
    MulElem(Var, Var),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Mat,
}

/// Gradients indexed by tape node, produced by [`Tape::backward_from`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, var: Var) -> Option<&Mat> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `var`, or a zero matrix of the leaf's shape when no path
    /// from the seed reached it.
    pub fn wrt_or_zero(&self, var: Var, tape: &Tape) -> Mat {
        match self.wrt(var) {
            Some(g) => g.clone(),
            None => {
                let (r, c) = tape.value(var).shape();
                Mat::zeros(r, c)
            }
        }
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Mat {
        &self.nodes[var.0].value
    }

    fn push(&mut self, op: Op, value: Mat) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(Op::Constant, value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(Op::MatMul(a, b), v))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = ops::transpose(self.value(a));
        self.push(Op::Transpose(a), v)
    }

    pub fn scale_add(&mut self, a: Var, b: Var, alpha: f64, beta: f64) -> Result<Var> {
        let v = ops::scale_add(self.value(a), self.value(b), alpha, beta)?;
        Ok(self.push(Op::ScaleAdd(a, b, alpha, beta), v))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.scale_add(a, b, 1.0, 1.0)
    }

    /// alpha * a, recorded as a degenerate scale_add.
    pub fn scale(&mut self, a: Var, alpha: f64) -> Var {
        let v = self.value(a).map(|x| alpha * x);
        self.push(Op::ScaleAdd(a, a, alpha, 0.0), v)
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::concat_cols(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatCols(a, b), v))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::concat_rows(self.value(a), self.value(b))?;
        Ok(self.push(Op::ConcatRows(a, b), v))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let v = ops::slice_cols(self.value(a), lo, hi)?;
        Ok(self.push(Op::SliceCols(a, lo, hi), v))
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let v = ops::slice_rows(self.value(a), lo, hi)?;
        Ok(self.push(Op::SliceRows(a, lo, hi), v))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = ops::relu(self.value(a));
        self.push(Op::Relu(a), v)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let v = ops::leaky_relu(self.value(a), slope)?;
        Ok(self.push(Op::LeakyRelu(a, slope), v))
    }

    pub fn softmax_axis(&mut self, a: Var, axis: Axis) -> Var {
        let v = ops::softmax_axis(self.value(a), axis);
        self.push(Op::Softmax(a, axis), v)
    }

    pub fn masked_softmax_rows(&mut self, a: Var, mask: Rc<Mask>) -> Result<Var> {
        let v = ops::masked_softmax_rows(self.value(a), &mask)?;
        Ok(self.push(Op::MaskedSoftmaxRows(a, mask), v))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let v = ops::log_softmax_rows(self.value(a));
        self.push(Op::LogSoftmaxRows(a), v)
    }

    pub fn mul_elem(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::mul_elem(self.value(a), self.value(b))?;
        Ok(self.push(Op::MulElem(a, b), v))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = ops::sum_all(self.value(a));
        self.push(Op::SumAll(a), v)
    }

    /// Mean of all entries; zero for an empty matrix.
    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        if n == 0 {
            return self.constant(Mat::zeros(1, 1));
        }
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Backpropagate from a scalar (1×1) node with seed gradient 1.
    pub fn backward(&self, seed: Var) -> Result<Gradients> {
        let shape = self.value(seed).shape();
        if shape != (1, 1) {
            return Err(Error::shape("backward", "1x1 seed", self.value(seed).shape_str()));
        }
        self.backward_from(seed, Mat::ones(1, 1))
    }

    /// Backpropagate an arbitrary cotangent from any node.
    pub fn backward_from(&self, seed: Var, cotangent: Mat) -> Result<Gradients> {
        if cotangent.shape() != self.value(seed).shape() {
            return Err(Error::shape(
                "backward_from",
                self.value(seed).shape_str(),
                cotangent.shape_str(),
            ));
        }
        let mut grads: Vec<Option<Mat>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        accumulate(&mut grads, seed, cotangent);
        for id in (0..=seed.0).rev() {
            let upstream = match &grads[id] {
                Some(u) => u.clone(),
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf | Op::Constant => {}
                Op::MatMul(a, b) => {
                    let (da, db) = ops::matmul_backward(self.value(*a), self.value(*b), &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                    self.accum_if_diff(&mut grads, *b, db);
                }
                Op::Transpose(a) => {
                    self.accum_if_diff(&mut grads, *a, ops::transpose_backward(&upstream));
                }
                Op::ScaleAdd(a, b, alpha, beta) => {
                    let (da, db) = ops::scale_add_backward(*alpha, *beta, &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                    self.accum_if_diff(&mut grads, *b, db);
                }
                Op::ConcatCols(a, b) => {
                    let (da, db) = ops::concat_cols_backward(self.value(*a).cols(), &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                    self.accum_if_diff(&mut grads, *b, db);
                }
                Op::ConcatRows(a, b) => {
                    let (da, db) = ops::concat_rows_backward(self.value(*a).rows(), &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                    self.accum_if_diff(&mut grads, *b, db);
                }
                Op::SliceCols(a, lo, _hi) => {
                    let da = ops::slice_cols_backward(self.value(*a).cols(), *lo, &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                }
                Op::SliceRows(a, lo, _hi) => {
                    let da = ops::slice_rows_backward(self.value(*a).rows(), *lo, &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                }
                Op::Relu(a) => {
                    let da = ops::relu_backward(self.value(*a), &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                }
                Op::LeakyRelu(a, slope) => {
                    let da = ops::leaky_relu_backward(self.value(*a), *slope, &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                }
                Op::Softmax(a, axis) => {
                    let da = ops::softmax_axis_backward(&self.nodes[id].value, *axis, &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                }
                Op::MaskedSoftmaxRows(a, mask) => {
                    let da =
                        ops::masked_softmax_rows_backward(&self.nodes[id].value, mask, &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                }
                Op::LogSoftmaxRows(a) => {
                    let da = ops::log_softmax_rows_backward(&self.nodes[id].value, &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                }
                Op::MulElem(a, b) => {
                    let (da, db) =
                        ops::mul_elem_backward(self.value(*a), self.value(*b), &upstream);
                    self.accum_if_diff(&mut grads, *a, da);
                    self.accum_if_diff(&mut grads, *b, db);
                }
                Op::SumAll(a) => {
                    let (r, c) = self.value(*a).shape();
                    self.accum_if_diff(&mut grads, *a, ops::sum_all_backward(r, c, &upstream));
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn accum_if_diff(&self, grads: &mut [Option<Mat>], var: Var, g: Mat) {
        if matches!(self.nodes[var.0].op, Op::Constant) {
            return;
        }
        accumulate(grads, var, g);
    }
}

fn accumulate(grads: &mut [Option<Mat>], var: Var, g: Mat) {
    match &mut grads[var.index()] {
        Some(existing) => {
            let summed = ops::scale_add(existing, &g, 1.0, 1.0).expect("gradient shapes agree");
            *existing = summed;
        }
        slot @ None => *slot = Some(g),
    }
}
