use rand::Rng;

use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Uniform in `±sqrt(1 / (C_in * K * K))`.
pub fn fan_in_uniform<T: Scalar, R: Rng + ?Sized>(shape: [usize; 4], rng: &mut R) -> Tensor<T> {
    let [_, c_in, kh, kw] = shape;
    let bound = (1.0 / (c_in * kh * kw).max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_, _, _, _| T::from_f64_lossy(rng.random_range(-bound..=bound)))
}

/// ICNR initialisation for a conv feeding `pixel_shuffle(r)`.
///
/// A sub-kernel of `C_out / r²` filters is drawn with `base_init` and each
/// filter is repeated for the `r²` sub-pixel positions it shuffles into, so
/// the initial conv→shuffle pair acts as nearest-neighbour upsampling of the
/// sub-kernel convolution.
pub fn icnr_init<T: Scalar>(
    shape: [usize; 4],
    r: usize,
    base_init: impl FnOnce([usize; 4]) -> Tensor<T>,
) -> Result<Tensor<T>> {
    let [c_out, c_in, kh, kw] = shape;
    let rr = r * r;
    if r == 0 || c_out % rr != 0 {
        return Err(shape_err!("ICNR: {c_out} output channels not divisible by r² = {rr}"));
    }
    let sub = base_init([c_out / rr, c_in, kh, kw]);
    if sub.shape() != [c_out / rr, c_in, kh, kw] {
        return Err(shape_err!("ICNR base initializer returned {:?}", sub.shape()));
    }
    Ok(Tensor::from_fn(shape, |o, i, y, x| sub.at(o / rr, i, y, x)))
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diffops::{conv2d, pixel_shuffle, Conv2dParams};

    fn nearest_up(x: &Tensor<f64>, r: usize) -> Tensor<f64> {
        let [n, c, h, w] = x.shape();
        Tensor::from_fn([n, c, h * r, w * r], |ni, ci, y, xi| x.at(ni, ci, y / r, xi / r))
    }

    #[test]
    fn fan_in_bound_and_determinism() {
        let mut a = ChaCha8Rng::seed_from_u64(3);
        let mut b = ChaCha8Rng::seed_from_u64(3);
        let wa: Tensor<f64> = fan_in_uniform([8, 4, 3, 3], &mut a);
        let wb: Tensor<f64> = fan_in_uniform([8, 4, 3, 3], &mut b);
        assert_eq!(wa, wb);
        assert!(wa.max_abs() <= (1.0f64 / 36.0).sqrt());
    }

    #[test]
    fn conv_then_shuffle_is_nearest_upsampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut sub = None;
        let w = icnr_init::<f64>([12, 2, 3, 3], 2, |s| {
            let t = fan_in_uniform(s, &mut rng);
            sub = Some(t.clone());
            t
        })
        .unwrap();
        let sub = sub.unwrap();
        let x = Tensor::<f64>::from_fn([1, 2, 4, 5], |_, c, y, x| ((c * 20 + y * 5 + x) as f64).sin());
        let full = Conv2dParams::same(w, Tensor::zeros([1, 12, 1, 1])).unwrap();
        let small = Conv2dParams::same(sub, Tensor::zeros([1, 3, 1, 1])).unwrap();
        let lhs = pixel_shuffle(&conv2d(&x, &full).unwrap(), 2).unwrap();
        let rhs = nearest_up(&conv2d(&x, &small).unwrap(), 2);
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn unit_factor_is_base_init() {
        let mut a = ChaCha8Rng::seed_from_u64(5);
        let mut b = ChaCha8Rng::seed_from_u64(5);
        let w = icnr_init::<f32>([4, 3, 3, 3], 1, |s| fan_in_uniform(s, &mut a)).unwrap();
        assert_eq!(w, fan_in_uniform([4, 3, 3, 3], &mut b));
    }

    #[test]
    fn constant_input_has_no_checkerboard() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = icnr_init::<f64>([8, 3, 3, 3], 2, |s| fan_in_uniform(s, &mut rng)).unwrap();
        let p = Conv2dParams::same(w, Tensor::zeros([1, 8, 1, 1])).unwrap();
        // interior of a constant image: every conv output is the same per channel
        let x = Tensor::<f64>::full([1, 3, 6, 6], 0.8);
        let up = pixel_shuffle(&conv2d(&x, &p).unwrap(), 2).unwrap();
        for c in 0..2 {
            let v = up.at(0, c, 2, 2);
            for y in 2..10 {
                for x in 2..10 {
                    assert!((up.at(0, c, y, x) - v).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn indivisible_channels() {
        assert!(icnr_init::<f32>([6, 1, 3, 3], 2, Tensor::zeros).is_err());
    }
}
