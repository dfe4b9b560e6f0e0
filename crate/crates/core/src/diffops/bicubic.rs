//! Separable bicubic resampling (Catmull-Rom, `a = -0.5`).
//!
//! Pixel centres sit at half-integer coordinates; samples past the border
//! replicate the edge pixel. Downscaling widens the kernel by the inverse
//! scale so it also acts as the anti-aliasing filter.

use crate::error::{param_err, Result};
use crate::tensor::{Scalar, Tensor, VjpFn};

const A: f64 = -0.5;

/// Cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let x = x.abs();
    if x <= 1.0 {
        ((A + 2.0) * x - (A + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((A * x - 5.0 * A) * x + 8.0 * A) * x - 4.0 * A
    } else {
        0.0
    }
}

/// A positive rational resize factor `num / den`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Scale {
    pub num: u32,
    pub den: u32,
}

impl Scale {
    pub fn new(num: u32, den: u32) -> Result<Self> {
        if num == 0 || den == 0 {
            return Err(param_err!("scale {num}/{den} must be positive"));
        }
        if num < den && !den.is_multiple_of(num) {
            return Err(param_err!("downscale {num}/{den} must be 1/integer"));
        }
        Ok(Self { num, den })
    }

    pub fn up(s: u32) -> Result<Self> {
        Self::new(s, 1)
    }

    pub fn down(s: u32) -> Result<Self> {
        Self::new(1, s)
    }

    pub fn apply(&self, len: usize) -> usize {
        len * self.num as usize / self.den as usize
    }

    fn ratio(&self) -> f64 {
        self.num as f64 / self.den as f64
    }
}

/// Sparse `out_len x in_len` interpolation matrix of one axis.
#[derive(Clone, Debug)]
pub(crate) struct AxisMap {
    in_len: usize,
    rows: Vec<Vec<(usize, f64)>>,
}

impl AxisMap {
    pub(crate) fn new(in_len: usize, scale: Scale) -> Self {
        let out_len = scale.apply(in_len);
        let ratio = scale.ratio();
        let stretch = if ratio < 1.0 { 1.0 / ratio } else { 1.0 };
        let radius = 2.0 * stretch;
        let rows = (0..out_len)
            .map(|o| {
                let center = (o as f64 + 0.5) / ratio - 0.5;
                let lo = (center - radius).floor() as isize + 1;
                let hi = (center + radius).ceil() as isize - 1;
                let mut taps: Vec<(usize, f64)> = Vec::new();
                for j in lo..=hi {
                    let wgt = cubic_kernel((center - j as f64) / stretch);
                    if wgt == 0.0 {
                        continue;
                    }
                    let idx = j.clamp(0, in_len as isize - 1) as usize;
                    match taps.iter_mut().find(|(i, _)| *i == idx) {
                        Some(t) => t.1 += wgt,
                        None => taps.push((idx, wgt)),
                    }
                }
                let total: f64 = taps.iter().map(|t| t.1).sum();
                for t in &mut taps {
                    t.1 /= total;
                }
                taps
            })
            .collect();
        Self { in_len, rows }
    }

    fn out_len(&self) -> usize {
        self.rows.len()
    }
}

fn resize_axis<T: Scalar>(x: &Tensor<T>, map: &AxisMap, horizontal: bool, transpose: bool) -> Result<Tensor<T>> {
    let [n, c, h, w] = x.shape();
    let (from, to) = if transpose {
        (map.out_len(), map.in_len)
    } else {
        (map.in_len, map.out_len())
    };
    let out_shape = if horizontal { [n, c, h, to] } else { [n, c, to, w] };
    let axis_len = if horizontal { w } else { h };
    debug_assert_eq!(axis_len, from);
    let mut out = vec![T::zero(); out_shape.iter().product()];
    let (oh, ow) = (out_shape[2], out_shape[3]);
    for nc in 0..n * c {
        let src = &x.data()[nc * h * w..(nc + 1) * h * w];
        let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
        let (lines, stride_in, step_in, stride_out, step_out) =
            if horizontal { (h, w, 1, ow, 1) } else { (w, 1, w, 1, ow) };
        for line in 0..lines {
            let s0 = line * stride_in;
            let d0 = line * stride_out;
            for (o, taps) in map.rows.iter().enumerate() {
                for &(i, wgt) in taps {
                    let wgt = T::from_f64_lossy(wgt);
                    if transpose {
                        let d = d0 + i * step_out;
                        dst[d] = dst[d] + wgt * src[s0 + o * step_in];
                    } else {
                        let d = d0 + o * step_out;
                        dst[d] = dst[d] + wgt * src[s0 + i * step_in];
                    }
                }
            }
        }
    }
    Tensor::new(out_shape, out)
}

pub fn bicubic_resize<T: Scalar>(x: &Tensor<T>, scale: Scale) -> Result<Tensor<T>> {
    if scale.num == scale.den {
        return Ok(x.clone());
    }
    let [_, _, h, w] = x.shape();
    if scale.apply(h) == 0 || scale.apply(w) == 0 {
        return Err(param_err!("resize of {h}x{w} by {}/{} is empty", scale.num, scale.den));
    }
    let mw = AxisMap::new(w, scale);
    let mh = AxisMap::new(h, scale);
    let tmp = resize_axis(x, &mw, true, false)?;
    resize_axis(&tmp, &mh, false, false)
}

/// The resize is a fixed linear map, so its vjp is the transpose.
pub fn bicubic_resize_vjp<T: Scalar>(x: &Tensor<T>, scale: Scale) -> Result<(Tensor<T>, VjpFn<'static, T, Tensor<T>>)> {
    let out = bicubic_resize(x, scale)?;
    let [_, _, h, w] = x.shape();
    let out_shape = out.shape();
    let vjp = Box::new(move |g: &Tensor<T>| {
        if g.shape() != out_shape {
            return Err(crate::error::shape_err!("bicubic cotangent {:?}", g.shape()));
        }
        if scale.num == scale.den {
            return Ok(g.clone());
        }
        let mw = AxisMap::new(w, scale);
        let mh = AxisMap::new(h, scale);
        let tmp = resize_axis(g, &mh, false, true)?;
        resize_axis(&tmp, &mw, true, true)
    });
    Ok((out, vjp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unit_scale_is_identity() {
        let x = Tensor::<f64>::from_fn([1, 2, 3, 4], |_, c, y, x| (c * 12 + y * 4 + x) as f64);
        assert_eq!(bicubic_resize(&x, Scale::new(3, 3).unwrap()).unwrap(), x);
    }

    #[test]
    fn constants_are_preserved() {
        let x = Tensor::<f64>::full([1, 3, 8, 12], 0.37);
        for scale in [
            Scale::up(2).unwrap(),
            Scale::up(3).unwrap(),
            Scale::down(4).unwrap(),
            Scale::new(3, 2).unwrap(),
        ] {
            let y = bicubic_resize(&x, scale).unwrap();
            assert!(y.data().iter().all(|&v| (v - 0.37).abs() < 1e-14));
        }
    }

    #[test]
    fn output_sizes() {
        let x = Tensor::<f32>::zeros([1, 1, 64, 64]);
        assert_eq!(
            bicubic_resize(&x, Scale::down(4).unwrap()).unwrap().shape(),
            [1, 1, 16, 16]
        );
        assert_eq!(
            bicubic_resize(&x, Scale::new(3, 2).unwrap()).unwrap().shape(),
            [1, 1, 96, 96]
        );
    }

    #[test]
    fn invalid_scales() {
        assert!(Scale::new(0, 1).is_err());
        assert!(Scale::new(2, 3).is_err());
    }

    #[test]
    fn upscaling_reproduces_linear_ramp_in_interior() {
        // Catmull-Rom reproduces first-degree polynomials exactly, so away
        // from the clamped border the 2x upscale of v(x) = x samples the
        // same line at the output centres: (o + 0.5) / 2 - 0.5.
        let w = 10;
        let x = Tensor::<f64>::from_fn([1, 1, 3, w], |_, _, _, x| x as f64);
        let y = bicubic_resize(&x, Scale::up(2).unwrap()).unwrap();
        for o in 4..(2 * w - 4) {
            let expected = (o as f64 + 0.5) / 2.0 - 0.5;
            assert!((y.at(0, 0, 1, o) - expected).abs() < 1e-12, "o={o}");
        }
    }

    #[test]
    fn flip_commutes_with_downscaling() {
        let x = Tensor::<f64>::from_fn([1, 3, 16, 16], |_, c, y, x| ((c * 5 + y * 3 + x * x) as f64).sin());
        let a = bicubic_resize(&x.flip_horizontal(), Scale::down(4).unwrap()).unwrap();
        let b = bicubic_resize(&x, Scale::down(4).unwrap()).unwrap().flip_horizontal();
        assert!(a.zip_map(&b, |u, v| u - v).unwrap().max_abs() < 1e-14);
    }

    proptest! {
        #[test]
        fn kernel_weights_sum_to_one_at_any_phase(phase in 0.0f64..1.0) {
            let total: f64 = (-1..=2).map(|k| cubic_kernel(phase - k as f64)).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn stretched_rows_are_normalised(len in 4usize..40, s in 1u32..5) {
            for scale in [Scale::up(s).unwrap(), Scale::down(s).unwrap()] {
                let map = AxisMap::new(len * s as usize, scale);
                for row in &map.rows {
                    let total: f64 = row.iter().map(|t| t.1).sum();
                    prop_assert!((total - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
