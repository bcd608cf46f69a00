//! Minimal reverse-mode automatic differentiation over dense f64 tensors.
//!
//! The primitive set is exactly what the model needs: dense linear algebra,
//! elementwise nonlinearities, masked softmax, layer norm, row
//! concatenation/splitting, and the structural ops (transpose, row gather,
//! full reduction) that the convolutional frontend and the losses require.

pub mod gradcheck;
pub mod ops;
pub mod tape;
pub mod tensor;

pub use gradcheck::{GradCheckReport, grad_check, rel_err};
pub use ops::{GatherPlan, Op};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
