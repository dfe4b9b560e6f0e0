//! Differentiable operators, model, losses and training harness for
//! multi-exemplar headshot super-resolution.
//!
//! Operators work on dense NCHW [`Tensor`]s and expose analytic
//! vector-Jacobian products; [`training::gradcheck`] verifies each of them
//! against central finite differences.

#![allow(clippy::type_complexity, clippy::too_many_arguments)]

pub mod alignment;
pub mod diffops;
pub mod error;
pub mod imaging;
pub mod losses;
pub mod model;
pub mod tensor;
pub mod training;
mod util;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub use util::write_atomic;
