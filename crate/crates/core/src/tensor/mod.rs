//! Dense tensors, reverse-mode autodiff and gradient checking.

mod dense;
mod gradcheck;
mod param;
mod tape;

pub use dense::{
    cross_entropy_next_token, masked_softmax_rows, matmul, matmul_at, matmul_bt, rms_norm, rope_apply, sigmoid, silu,
    softmax_rows, DType, Tensor, IGNORE_ID,
};
pub use gradcheck::{check_tape_fn, finite_diff_check, relative_error};
pub use param::{ParamId, ParamStore, Parameter};
pub use tape::{input64, Grads, Tape, Var};
