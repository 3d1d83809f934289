//! Dense 2-D tensors with tape-based reverse-mode differentiation.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, GradCheckReport, REL_ERROR_FLOOR};
pub use params::{Param, ParamId, ParamStore};
pub use tape::{softmax_rows, Gradients, Tape, Var};
pub use tensor::{matmul, Real, Tensor};
