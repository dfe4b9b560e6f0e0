//! Lossless space/depth rearrangements. Output channel `c*r*r + dy*r + dx`
//! holds intra-block offset `(dy, dx)` of input channel `c`.

use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor, VjpFn};

pub fn space_to_depth<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 {
        return Err(param_err!("block size must be positive"));
    }
    let [n, c, h, w] = x.shape();
    if h % r != 0 || w % r != 0 {
        return Err(shape_err!("space_to_depth: {h}x{w} not divisible by {r}"));
    }
    Ok(Tensor::from_fn([n, c * r * r, h / r, w / r], |ni, co, y, xo| {
        let (ci, rem) = (co / (r * r), co % (r * r));
        x.at(ni, ci, y * r + rem / r, xo * r + rem % r)
    }))
}

/// Sub-pixel upsampling, the exact inverse of [`space_to_depth`].
pub fn pixel_shuffle<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<Tensor<T>> {
    if r == 0 {
        return Err(param_err!("upscale factor must be positive"));
    }
    let [n, c, h, w] = x.shape();
    if c % (r * r) != 0 {
        return Err(shape_err!("pixel_shuffle: {c} channels not divisible by {}", r * r));
    }
    Ok(Tensor::from_fn([n, c / (r * r), h * r, w * r], |ni, co, y, xo| {
        x.at(ni, co * r * r + (y % r) * r + xo % r, y / r, xo / r)
    }))
}

pub fn space_to_depth_vjp<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<(Tensor<T>, VjpFn<'static, T, Tensor<T>>)> {
    let out = space_to_depth(x, r)?;
    let shape = out.shape();
    Ok((
        out,
        Box::new(move |g: &Tensor<T>| {
            if g.shape() != shape {
                return Err(shape_err!("space_to_depth cotangent {:?}", g.shape()));
            }
            pixel_shuffle(g, r)
        }),
    ))
}

pub fn pixel_shuffle_vjp<T: Scalar>(x: &Tensor<T>, r: usize) -> Result<(Tensor<T>, VjpFn<'static, T, Tensor<T>>)> {
    let out = pixel_shuffle(x, r)?;
    let shape = out.shape();
    Ok((
        out,
        Box::new(move |g: &Tensor<T>| {
            if g.shape() != shape {
                return Err(shape_err!("pixel_shuffle cotangent {:?}", g.shape()));
            }
            space_to_depth(g, r)
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn block_ordering() {
        let x = Tensor::<f64>::new([1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let d = space_to_depth(&x, 2).unwrap();
        assert_eq!(d.shape(), [1, 4, 1, 1]);
        assert_eq!(d.data(), &[1.0, 2.0, 3.0, 4.0]);
        assert_eq!(pixel_shuffle(&d, 2).unwrap(), x);
    }

    #[test]
    fn unit_factor_is_identity() {
        let x = Tensor::<f64>::from_fn([2, 3, 2, 5], |n, c, y, x| (n * 30 + c * 10 + y * 5 + x) as f64);
        assert_eq!(space_to_depth(&x, 1).unwrap(), x);
        assert_eq!(pixel_shuffle(&x, 1).unwrap(), x);
    }

    #[test]
    fn indivisible_shapes() {
        assert!(space_to_depth(&Tensor::<f32>::zeros([1, 1, 3, 4]), 2).is_err());
        assert!(pixel_shuffle(&Tensor::<f32>::zeros([1, 3, 2, 2]), 2).is_err());
    }

    proptest! {
        #[test]
        fn mutually_inverse_permutations(
            r in 1usize..4, c in 1usize..3, bh in 1usize..3, bw in 1usize..3, seed in 0u32..1000,
        ) {
            let shape = [1, c, bh * r, bw * r];
            let x = Tensor::<f64>::from_fn(shape, |_, ci, y, xi| {
                (seed as f64) + (ci * 1000 + y * 50 + xi) as f64
            });
            let d = space_to_depth(&x, r).unwrap();
            prop_assert_eq!(&pixel_shuffle(&d, r).unwrap(), &x);
            let mut a = x.data().to_vec();
            let mut b = d.data().to_vec();
            a.sort_by(f64::total_cmp);
            b.sort_by(f64::total_cmp);
            prop_assert_eq!(a, b);
        }
    }
}
