//! Dense reverse-mode automatic differentiation over `f64` tensors, plus the
//! Adam optimizer and a finite-difference gradient checker.

mod adam;
mod exact;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use exact::{exact_sum, ExactSum};
pub use gradcheck::{finite_difference_gradcheck, gradcheck_expr, GradcheckReport, FD_STEP};
pub use tape::{forward_backward, Gradients, Tape, Var};
pub use tensor::Tensor;
