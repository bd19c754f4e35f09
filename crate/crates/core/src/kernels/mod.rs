//! Dense compute kernels behind the tape ops.
//!
//! Each kernel owns its output buffer and splits it into disjoint chunks for
//! [`crate::parallel`]; the inner loops run in a fixed order, so every kernel
//! is bit-deterministic at any thread count.

mod conv;
mod gram;
mod resize;
mod temporal;

pub use conv::{conv2d_backward, conv2d_forward, conv3d_forward, Conv2dCfg, Pad};
pub use gram::{gram_backward, gram_forward};
pub use resize::{resize_backward, resize_forward};
pub use temporal::{
    shift_fixed_backward, shift_fixed_forward, temporal_conv_backward, temporal_conv_forward,
    GroupSplit,
};
