//! Federated split learning of a hybrid vision transformer with
//! intermediate representation sampling.
//!
//! The crate is `no_std` (with `alloc`) and contains everything that is pure
//! computation: the tensor engine and its reverse-mode differentiation
//! ([`autodiff`]), the optimizer ([`adam`]), the model components
//! ([`model`]), the client/server protocol state machines ([`protocol`]), the
//! synthetic multi-domain data generator ([`synth`]) and score-based metrics
//! ([`metrics`]). File formats, configuration and the command line live in the
//! `fedsis-lab` crate.

#![no_std]
// `Real` is f32 or f64 by feature, so casts between them are not redundant,
// and `!(x > 0.0)` is how NaN gets rejected along with the bad values.
#![allow(clippy::unnecessary_cast, clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod adam;
pub mod autodiff;
pub mod error;
pub mod metrics;
pub mod model;
pub mod param;
pub mod protocol;
pub mod real;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use tensor::Tensor;
