//! Minimal reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod optim;
mod params;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{check_param_coordinates, finite_difference_check, GradCheckReport};
pub use optim::{Adam, AdamConfig};
pub use params::{Bound, ParamId, ParamStore};
pub use scalar::{DType, Scalar};
pub use tape::{Gradients, OpKind, Tape, Var};
pub use tensor::Tensor;
