//! Dense tensors, a tape-based reverse-mode engine over a closed op set, and
//! the finite-difference oracle that checks it.

mod gradcheck;
mod init;
mod optim;
mod params;
mod scalar;
mod suite;
mod tape;
mod tensor;

pub use gradcheck::{check_gradients, check_param_gradients, finite_diff_check, CheckOptions, Evaluation, GradReport};
pub use init::truncated_normal;
pub use optim::{cosine_lr, AdamW};
pub use params::{Graph, ParamId, ParamSet};
pub use scalar::Scalar;
pub use tape::{conv_out_len, ConvGeom, Gradients, Tape, Var};
pub use suite::{op_gradient_suite, OP_STEP, OP_TOL};
pub use tensor::{Tensor, Tensor64, TensorBase};
