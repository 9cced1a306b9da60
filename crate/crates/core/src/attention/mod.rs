//! Multi-head pooling attention and the pre-norm transformer block built on it.

mod block;
mod pool;
mod rpe;

pub use block::{linear, mhpa, transformer_block, BlockConfig, BlockOutput, BlockParams};
pub use pool::{pool_skip, pool_tokens, pooled_len, skip_kernel, Layout, PoolSpec};
pub use rpe::{delta_indices, relative_bias};
