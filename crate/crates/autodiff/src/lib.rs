//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! Values are dense `f64` matrices ([`Tensor`]); scalars are `1×1` and
//! vectors are `1×n` rows. Every op is evaluated when it is recorded, and
//! [`Tape::grad`] records the backward pass as further ops, so gradients can
//! be differentiated again (double backpropagation, Hessian-vector products).
//!
//! Conventions:
//! - ReLU has derivative `0` at exactly `0`; leaky ReLU uses the given slope there.
//! - Derivative masks (`step_mask`, `sign_mask`) are constants under
//!   differentiation, so second derivatives of piecewise-linear ops are zero.
//! - A tape is single-threaded; separate tapes are independent.

mod backward;
mod error;
mod fd;
mod tape;
mod tensor;

pub use error::{AutodiffError, Result};
pub use fd::{fd_grad, max_rel_error, rel_error};
pub use tape::{Checkpoint, Node, NodeId, Op, Tape};
pub use tensor::{Shape, Tensor};

/// Default slope for leaky ReLU on negative inputs.
pub const LEAKY_RELU_SLOPE: f64 = 0.01;
