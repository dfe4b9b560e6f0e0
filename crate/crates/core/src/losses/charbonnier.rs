use super::LossVjp;
use crate::error::{param_err, Result};
use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_CHARBONNIER_EPS: f64 = 1e-3;

/// Mean over all elements of `sqrt((sr - hr)^2 + eps^2)`.
pub fn charbonnier<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, eps: T) -> Result<T> {
    sr.expect_same_shape(hr, "charbonnier")?;
    if eps <= T::zero() {
        return Err(param_err!("charbonnier eps must be positive"));
    }
    let e2 = eps * eps;
    let total: T = sr
        .data()
        .iter()
        .zip(hr.data())
        .map(|(&a, &b)| ((a - b) * (a - b) + e2).sqrt())
        .sum();
    Ok(total / T::from_usize(sr.len()).unwrap())
}

pub fn charbonnier_vjp<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, eps: T) -> Result<(T, LossVjp<'static, T>)> {
    let value = charbonnier(sr, hr, eps)?;
    let (sr, hr) = (sr.clone(), hr.clone());
    let vjp = Box::new(move |g: T| {
        let scale = g / T::from_usize(sr.len()).unwrap();
        let e2 = eps * eps;
        sr.zip_map(&hr, |a, b| {
            let d = a - b;
            scale * d / (d * d + e2).sqrt()
        })
    });
    Ok((value, vjp))
}
