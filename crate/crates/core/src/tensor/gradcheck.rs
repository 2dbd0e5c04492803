//! Finite-difference verification of backward implementations.
//!
//! The checker reduces any operation to a scalar by summing its output
//! against a fixed random cotangent, then compares the analytic gradient of
//! that scalar with central differences, entry by entry.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::mat::Mat;
use crate::tensor::ops;
use crate::tensor::tape::{Tape, Var};

/// A differentiable operation: a forward map over matrices and a backward
/// map taking the upstream gradient to per-input gradients.
pub trait DiffOp {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Mat]) -> Result<Mat>;
    fn backward(&self, inputs: &[&Mat], upstream: &Mat) -> Result<Vec<Mat>>;
}

/// A `DiffOp` defined by a tape-building closure, so composite computations
/// (a reasoning layer, the whole pipeline) check exactly the code that runs
/// in production.
pub struct TapeProgram<F> {
    name: String,
    build: F,
}

impl<F> TapeProgram<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    pub fn new(name: impl Into<String>, build: F) -> Self {
        TapeProgram {
            name: name.into(),
            build,
        }
    }
}

impl<F> DiffOp for TapeProgram<F>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&Mat]) -> Result<Mat> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf((*m).clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        Ok(tape.value(out).clone())
    }

    fn backward(&self, inputs: &[&Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf((*m).clone())).collect();
        let out = (self.build)(&mut tape, &vars)?;
        let grads = tape.backward_from(out, upstream.clone())?;
        Ok(vars.iter().map(|&v| grads.wrt_or_zero(v, &tape)).collect())
    }
}

/// Test fixture: wraps an op and scales its analytic gradients, so the
/// checker can prove it rejects wrong backward passes.
pub struct CorruptedBackward<O> {
    inner: O,
    factor: f64,
    name: String,
}

impl<O: DiffOp> CorruptedBackward<O> {
    pub fn new(inner: O, factor: f64) -> Self {
        let name = format!("{}_corrupted", inner.name());
        CorruptedBackward {
            inner,
            factor,
            name,
        }
    }
}

impl<O: DiffOp> DiffOp for CorruptedBackward<O> {
    fn name(&self) -> &str {
        &self.name
    }

    fn forward(&self, inputs: &[&Mat]) -> Result<Mat> {
        self.inner.forward(inputs)
    }

    fn backward(&self, inputs: &[&Mat], upstream: &Mat) -> Result<Vec<Mat>> {
        let grads = self.inner.backward(inputs, upstream)?;
        Ok(grads.into_iter().map(|g| g.map(|x| x * self.factor)).collect())
    }
}

/// Outcome of one finite-difference check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub op: String,
    pub max_rel_err: f64,
    pub entries_checked: usize,
    pub pass: bool,
}

/// Compare the analytic gradient of `sum(cotangent ⊙ op(inputs))` against
/// central differences with step `eps`. Passes iff the worst relative error
/// over every entry of every input stays within `tol`.
pub fn grad_check(
    op: &dyn DiffOp,
    inputs: &[Mat],
    eps: f64,
    tol: f64,
    seed: u64,
) -> Result<GradCheckReport> {
    if eps <= 0.0 {
        return Err(Error::Config(format!("gradcheck eps must be positive, got {eps}")));
    }
    for (k, m) in inputs.iter().enumerate() {
        if m.first_non_finite().is_some() {
            return Err(Error::Config(format!(
                "gradcheck input {k} of {} is not finite",
                op.name()
            )));
        }
    }
    let refs: Vec<&Mat> = inputs.iter().collect();
    let out = op.forward(&refs)?;
    out.check_finite(op.name())?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cot = Mat::random_uniform(out.rows(), out.cols(), -1.0, 1.0, &mut rng);

    let analytic = op.backward(&refs, &cot)?;
    if analytic.len() != inputs.len() {
        return Err(Error::Config(format!(
            "{}: backward returned {} gradients for {} inputs",
            op.name(),
            analytic.len(),
            inputs.len()
        )));
    }
    for (k, (g, m)) in analytic.iter().zip(inputs).enumerate() {
        if g.shape() != m.shape() {
            return Err(Error::shape("grad_check", m.shape_str(), format!("input {k} grad {}", g.shape_str())));
        }
        g.check_finite(&format!("{} backward input {k}", op.name()))?;
    }

    let probe = |mats: &[Mat]| -> Result<f64> {
        let refs: Vec<&Mat> = mats.iter().collect();
        let y = op.forward(&refs)?;
        let s = ops::sum_all(&ops::mul_elem(&cot, &y)?);
        Ok(s.get(0, 0))
    };

    let mut max_rel_err = 0.0f64;
    let mut entries = 0usize;
    let mut work: Vec<Mat> = inputs.to_vec();
    for k in 0..inputs.len() {
        for idx in 0..inputs[k].len() {
            let original = work[k].as_slice()[idx];
            work[k].as_mut_slice()[idx] = original + eps;
            let plus = probe(&work)?;
            work[k].as_mut_slice()[idx] = original - eps;
            let minus = probe(&work)?;
            work[k].as_mut_slice()[idx] = original;
            if !plus.is_finite() || !minus.is_finite() {
                let cols = inputs[k].cols().max(1);
                return Err(Error::NonFinite {
                    op: format!("{} finite-difference probe (input {k})", op.name()),
                    row: idx / cols,
                    col: idx % cols,
                });
            }
            let numeric = (plus - minus) / (2.0 * eps);
            let a = analytic[k].as_slice()[idx];
            let rel = (a - numeric).abs() / 1.0f64.max(a.abs()).max(numeric.abs());
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            entries += 1;
        }
    }

    Ok(GradCheckReport {
        op: op.name().to_string(),
        max_rel_err,
        entries_checked: entries,
        pass: max_rel_err <= tol,
    })
}

/// Uniform sample with entries resampled away from zero, for checking
/// kinked activations (ReLU family) off their non-differentiable point.
pub fn random_away_from_zero(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Mat {
    let mut m = Mat::random_uniform(rows, cols, -1.0, 1.0, rng);
    for v in m.as_mut_slice() {
        while v.abs() < 1e-3 {
            *v = rng.random_range(-1.0..1.0);
        }
    }
    m
}
