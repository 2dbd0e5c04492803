//! Dense-matrix math with reverse-mode gradients and a finite-difference
//! checker. Everything downstream — graph construction, attention reasoning,
//! projection, the training loop — is built from these operations.

pub mod gradcheck;
pub mod mat;
pub mod ops;
pub mod tape;

pub use gradcheck::{grad_check, CorruptedBackward, DiffOp, GradCheckReport, TapeProgram};
pub use mat::{Mask, Mat};
pub use ops::Axis;
pub use tape::{Gradients, Tape, Var};
