//! Deformable convolution (no modulation mask, one offset group).
//!
//! Offsets have shape `(N, 2*K*K, H, W)`. For tap `t` (row-major over the
//! kernel) channel `2t` holds the row displacement and `2t+1` the column
//! displacement, in pixels, relative to the regular grid position.

use super::conv::{gemm_backward, gemm_forward, Conv2dParams};
use super::sample::Tap;
use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor, VjpFn};

#[derive(Clone, Debug)]
pub struct DeformConvGrads<T> {
    pub x: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    pub offsets: Tensor<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>, off: &Tensor<T>) -> Result<()> {
    p.validate()?;
    let k = p.kernel();
    if p.stride != 1 || p.padding != (k - 1) / 2 {
        return Err(param_err!(
            "deformable conv needs stride 1 and padding {}, got stride {} padding {}",
            (k - 1) / 2,
            p.stride,
            p.padding
        ));
    }
    let [n, c, h, w] = x.shape();
    if c != p.c_in() {
        return Err(shape_err!(
            "deformable conv: {c} input channels, weight expects {}",
            p.c_in()
        ));
    }
    if off.shape() != [n, 2 * k * k, h, w] {
        return Err(shape_err!(
            "offsets {:?} must be [{n}, {}, {h}, {w}]",
            off.shape(),
            2 * k * k
        ));
    }
    Ok(())
}

/// Sampling geometry of sample `ni`, indexed `[t * H * W + p]`.
fn sample_taps<T: Scalar>(off: &Tensor<T>, ni: usize, k: usize) -> Vec<Tap<T>> {
    let [_, _, h, w] = off.shape();
    let pad = (k - 1) / 2;
    let mut taps = Vec::with_capacity(k * k * h * w);
    for ki in 0..k {
        for kj in 0..k {
            let t = ki * k + kj;
            for y in 0..h {
                for x in 0..w {
                    let py = T::from_isize(y as isize + ki as isize - pad as isize).unwrap() + off.at(ni, 2 * t, y, x);
                    let px =
                        T::from_isize(x as isize + kj as isize - pad as isize).unwrap() + off.at(ni, 2 * t + 1, y, x);
                    taps.push(Tap::new(h, w, py, px));
                }
            }
        }
    }
    taps
}

fn deform_cols<T: Scalar>(xs: &[T], c: usize, plane: usize, taps: &[Tap<T>], cols: &mut [T]) {
    let kk_plane = taps.len();
    for ci in 0..c {
        let src = &xs[ci * plane..(ci + 1) * plane];
        let dst = &mut cols[ci * kk_plane..(ci + 1) * kk_plane];
        for (d, tap) in dst.iter_mut().zip(taps) {
            *d = tap.sample(src);
        }
    }
}

pub fn deformable_conv<T: Scalar>(x: &Tensor<T>, p: &Conv2dParams<T>, off: &Tensor<T>) -> Result<Tensor<T>> {
    Ok(forward(x, p, off, false)?.0)
}

fn forward<T: Scalar>(
    x: &Tensor<T>,
    p: &Conv2dParams<T>,
    off: &Tensor<T>,
    keep: bool,
) -> Result<(Tensor<T>, Vec<Vec<T>>)> {
    check(x, p, off)?;
    let [n, c, h, w] = x.shape();
    let k = p.kernel();
    let co = p.c_out();
    let plane = h * w;
    let mut out = vec![T::zero(); n * co * plane];
    let mut cols = vec![T::zero(); c * k * k * plane];
    let mut kept = Vec::new();
    for ni in 0..n {
        let taps = sample_taps(off, ni, k);
        deform_cols(
            &x.data()[ni * c * plane..(ni + 1) * c * plane],
            c,
            plane,
            &taps,
            &mut cols,
        );
        gemm_forward(p, &cols, plane, &mut out[ni * co * plane..(ni + 1) * co * plane]);
        if keep {
            kept.push(cols.clone());
        }
    }
    Ok((Tensor::new([n, co, h, w], out)?, kept))
}

pub fn deformable_conv_vjp<T: Scalar>(
    x: &Tensor<T>,
    p: &Conv2dParams<T>,
    off: &Tensor<T>,
) -> Result<(Tensor<T>, VjpFn<'static, T, DeformConvGrads<T>>)> {
    let (out, cols) = forward(x, p, off, true)?;
    let (x, p, off) = (x.clone(), p.clone(), off.clone());
    let out_shape = out.shape();
    let vjp = Box::new(move |g: &Tensor<T>| {
        if g.shape() != out_shape {
            return Err(shape_err!(
                "deformable conv cotangent {:?} != {:?}",
                g.shape(),
                out_shape
            ));
        }
        let [n, c, h, w] = x.shape();
        let k = p.kernel();
        let kk = k * k;
        let co = p.c_out();
        let plane = h * w;
        let mut dx = vec![T::zero(); x.len()];
        let mut dw = vec![T::zero(); p.weight.len()];
        let mut db = vec![T::zero(); co];
        let mut doff = vec![T::zero(); off.len()];
        let mut dcols = vec![T::zero(); c * kk * plane];
        for ni in 0..n {
            let gs = &g.data()[ni * co * plane..(ni + 1) * co * plane];
            gemm_backward(&p, &cols[ni], gs, plane, &mut dw, &mut db, &mut dcols);
            let taps = sample_taps(&off, ni, k);
            let doff_n = &mut doff[ni * 2 * kk * plane..(ni + 1) * 2 * kk * plane];
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let src = &x.data()[base..base + plane];
                let dxs = &mut dx[base..base + plane];
                for t in 0..kk {
                    let row = &dcols[(ci * kk + t) * plane..(ci * kk + t + 1) * plane];
                    let taps_t = &taps[t * plane..(t + 1) * plane];
                    for (pi, (&gv, tap)) in row.iter().zip(taps_t).enumerate() {
                        if gv == T::zero() {
                            continue;
                        }
                        tap.scatter(dxs, gv);
                        let (gy, gx) = tap.grad_pos(src);
                        let iy = 2 * t * plane + pi;
                        doff_n[iy] = doff_n[iy] + gv * gy;
                        doff_n[iy + plane] = doff_n[iy + plane] + gv * gx;
                    }
                }
            }
        }
        Ok(DeformConvGrads {
            x: Tensor::new(x.shape(), dx)?,
            weight: Tensor::new(p.weight.shape(), dw)?,
            bias: Tensor::new([1, co, 1, 1], db)?,
            offsets: Tensor::new(off.shape(), doff)?,
        })
    });
    Ok((out, vjp))
}

/// Offsets that add the same `(dy, dx)` flow vector to all `K*K` taps.
pub fn broadcast_flow_to_offsets<T: Scalar>(flow: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let [n, c, h, w] = flow.shape();
    if c != 2 {
        return Err(shape_err!("flow must have 2 channels, got {c}"));
    }
    Ok(Tensor::from_fn([n, 2 * k * k, h, w], |ni, ch, y, x| {
        flow.at(ni, ch % 2, y, x)
    }))
}

/// Transpose of [`broadcast_flow_to_offsets`]: sums tap cotangents.
pub fn reduce_offsets_to_flow<T: Scalar>(doff: &Tensor<T>) -> Tensor<T> {
    let [n, c2, h, w] = doff.shape();
    Tensor::from_fn([n, 2, h, w], |ni, ch, y, x| {
        (0..c2 / 2).fold(T::zero(), |acc, t| acc + doff.at(ni, 2 * t + ch, y, x))
    })
}
