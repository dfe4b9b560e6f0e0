use super::{sign, LossVjp};
use crate::error::Result;
use crate::tensor::{Scalar, Tensor};

/// Mean absolute difference between two feature maps. The features come
/// from whatever extractor the caller chooses.
pub fn feature_l1<T: Scalar>(fea_sr: &Tensor<T>, fea_hr: &Tensor<T>) -> Result<T> {
    fea_sr.expect_same_shape(fea_hr, "feature_l1")?;
    let total: T = fea_sr
        .data()
        .iter()
        .zip(fea_hr.data())
        .map(|(&a, &b)| (a - b).abs())
        .sum();
    Ok(total / T::from_usize(fea_sr.len().max(1)).unwrap())
}

pub fn feature_l1_vjp<T: Scalar>(fea_sr: &Tensor<T>, fea_hr: &Tensor<T>) -> Result<(T, LossVjp<'static, T>)> {
    let value = feature_l1(fea_sr, fea_hr)?;
    let (a, b) = (fea_sr.clone(), fea_hr.clone());
    let vjp = Box::new(move |g: T| {
        let scale = g / T::from_usize(a.len().max(1)).unwrap();
        a.zip_map(&b, |u, v| scale * sign(u - v))
    });
    Ok((value, vjp))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn examples() {
        let a = Tensor::<f64>::new([1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let b = Tensor::<f64>::new([1, 2, 1, 1], vec![2.0, 4.0]).unwrap();
        assert_eq!(feature_l1(&a, &a).unwrap(), 0.0);
        assert_eq!(feature_l1(&a, &b).unwrap(), 1.5);
        let (_, vjp) = feature_l1_vjp(&a, &b).unwrap();
        assert_eq!(vjp(1.0).unwrap().data(), &[-0.5, -0.5]);
    }
}
