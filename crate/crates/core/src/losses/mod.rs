//! Objective functions: Charbonnier reconstruction, local correlation maps
//! and the correlation loss, feature-space L1, relativistic GAN terms and
//! their weighted combination.

mod charbonnier;
mod combined;
mod correlation;
mod gan;
mod perceptual;

pub use charbonnier::{charbonnier, charbonnier_vjp, DEFAULT_CHARBONNIER_EPS};
pub use combined::{combined_loss, combined_loss_vjp, CombinedGrads, LossBreakdown, LossWeights};
pub use correlation::{correlation_loss, correlation_loss_vjp, correlation_map, correlation_map_vjp, CorrelationMap};
pub use gan::relativistic_losses;
pub use perceptual::{feature_l1, feature_l1_vjp};

use crate::error::Result;
use crate::tensor::Tensor;

/// Backward map of a scalar loss: upstream scalar cotangent in, input
/// cotangent out.
pub type LossVjp<'a, T> = Box<dyn Fn(T) -> Result<Tensor<T>> + 'a>;

#[inline]
pub(crate) fn sign<T: crate::Scalar>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}
