//! Reverse-mode automatic differentiation over dense `f64` tensors, plus Adam.

mod adam;
mod gradcheck;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use gradcheck::{finite_diff_check, GradCheckReport, FD_STEP, REL_ERROR_FLOOR};
pub use tensor::{backward, reset_tape, tape_len, Gradients, Tensor};

pub(crate) use tensor::sigmoid;
