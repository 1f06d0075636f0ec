//! Dense tensors, reverse-mode differentiation and gradient checking.

mod gradcheck;
mod io;
pub(crate) mod ops;
mod params;
mod real;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_fn, GradCheckOptions, GradCheckReport, ParamCheck};
pub use io::{
    decode_tensor, decode_tensor_prefix, encode_tensor, read_tensor, tensor_to_bytes, write_tensor,
    AnyTensor, MAX_ELEMENTS, TENSOR_MAGIC,
};
pub use ops::{layer_norm, masked_softmax, matmul};
pub use params::{Grads, ParamEntry, ParamId, ParamStore};
pub use real::{DType, Real};
pub use tape::{CustomOp, Tape, Var};
pub use tensor::Tensor;
