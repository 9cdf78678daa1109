//! Sobolev training: fitting networks to target values and input-derivatives.
//!
//! Models are built on the [`sobolev_autodiff`] tape so that losses may
//! contain input-gradients of the model and still be differentiated with
//! respect to its parameters.

pub mod benchmarks;
pub mod distill;
pub mod error;
pub mod gradcheck;
pub mod nn;
pub mod persist;
pub mod regression;
pub mod seeds;
pub mod sobolev;
pub mod syngrad;
pub mod witness;

pub use error::{Error, Result};
