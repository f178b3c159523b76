//! Dense f64 math with hand-derived backward passes.
//!
//! Everything here is deliberately small: 2-D matrices plus per-row vectors,
//! fixed row-major accumulation order, no broadcasting beyond a bias row.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{central_difference, finite_difference_check, relative_error};
pub use kernels::{
    cross_entropy_grad, cross_entropy_loss, gelu, gelu_grad, layer_norm, layer_norm_backward,
    matmul, matmul_backward, softmax, softmax_row, stable_sum, DEFAULT_LN_EPS,
};
pub use tape::{Gradients, GradTape, SelectMode, Var};
pub use tensor::{DenseTensor, TENSOR_MAGIC};
