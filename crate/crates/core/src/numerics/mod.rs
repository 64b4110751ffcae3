//! Dense tensors, reverse-mode differentiation and symmetric eigensolver.

mod linalg;
mod tape;
mod tensor;

pub use linalg::{cosine, eig_sym, finite_diff_grad, Spectrum};
pub use tape::{log_sigmoid, sigmoid, softmax_rows, Gradients, ParamId, Segment, Tape, Var};
pub(crate) use tensor::gemm as gemm_into;
pub use tensor::{dot, norm, Tensor};
