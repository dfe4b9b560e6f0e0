//! Local correlation maps and the correlation loss.
//!
//! After removing each channel's spatial mean, every pixel is correlated
//! with its neighbours on a (possibly dilated) `k x k` grid:
//!
//! `cor(i, j, x, y) = 1/k² · Σ_c Î_c(x, y) · Î_c(x - i·d, y - j·d)`
//!
//! where `x` is the column, `y` the row and `i, j ∈ [-(k-1)/2, (k-1)/2]`.
//! Displacement `(i, j)` lands in channel `(i + r)·k + (j + r)` with
//! `r = (k-1)/2`. Neighbours outside the image contribute zero and the
//! `1/k²` normaliser is kept at the borders.

use super::{sign, LossVjp};
use crate::error::{param_err, Result};
use crate::tensor::{channel_mean, Scalar, Tensor, VjpFn};

/// A `(N, k², H, W)` correlation tensor together with its window geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct CorrelationMap<T> {
    map: Tensor<T>,
    k: usize,
    dilation: usize,
}

impl<T: Scalar> CorrelationMap<T> {
    pub fn tensor(&self) -> &Tensor<T> {
        &self.map
    }

    pub fn into_tensor(self) -> Tensor<T> {
        self.map
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    /// Channel holding displacement `(i, j)` (column, row).
    pub fn channel(&self, i: isize, j: isize) -> usize {
        displacement_channel(self.k, i, j)
    }

    pub fn get(&self, n: usize, i: isize, j: isize, x: usize, y: usize) -> T {
        self.map.at(n, self.channel(i, j), y, x)
    }
}

fn displacement_channel(k: usize, i: isize, j: isize) -> usize {
    let r = (k as isize - 1) / 2;
    ((i + r) * k as isize + (j + r)) as usize
}

fn check_window(k: usize, d: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(param_err!("correlation window k must be odd, got {k}"));
    }
    if d == 0 {
        return Err(param_err!("correlation dilation must be positive"));
    }
    Ok(())
}

fn centered<T: Scalar>(img: &Tensor<T>) -> Result<Tensor<T>> {
    let mean = channel_mean(img)?;
    let plane = img.plane();
    let data = img
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| v - mean.data()[i / plane])
        .collect();
    Tensor::new(img.shape(), data)
}

/// Window displacements in channel order, as `(row offset, column offset)`.
fn offsets(k: usize, d: usize) -> Vec<(isize, isize)> {
    let r = (k as isize - 1) / 2;
    let mut out = Vec::with_capacity(k * k);
    for i in -r..=r {
        for j in -r..=r {
            out.push((j * d as isize, i * d as isize));
        }
    }
    out
}

pub fn correlation_map<T: Scalar>(img: &Tensor<T>, k: usize, d: usize) -> Result<CorrelationMap<T>> {
    check_window(k, d)?;
    let cen = centered(img)?;
    Ok(CorrelationMap {
        map: correlate(&cen, k, d),
        k,
        dilation: d,
    })
}

fn correlate<T: Scalar>(cen: &Tensor<T>, k: usize, d: usize) -> Tensor<T> {
    let [n, c, h, w] = cen.shape();
    let plane = h * w;
    let norm = T::one() / T::from_usize(k * k).unwrap();
    let offs = offsets(k, d);
    let mut out = vec![T::zero(); n * k * k * plane];
    for ni in 0..n {
        for (t, &(dy, dx)) in offs.iter().enumerate() {
            let dst = &mut out[(ni * k * k + t) * plane..(ni * k * k + t + 1) * plane];
            for ci in 0..c {
                let src = &cen.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
                for y in 0..h {
                    let ny = y as isize - dy;
                    if ny < 0 || ny >= h as isize {
                        continue;
                    }
                    for x in 0..w {
                        let nx = x as isize - dx;
                        if nx < 0 || nx >= w as isize {
                            continue;
                        }
                        let p = y * w + x;
                        dst[p] = dst[p] + src[p] * src[ny as usize * w + nx as usize];
                    }
                }
            }
            for v in dst.iter_mut() {
                *v = *v * norm;
            }
        }
    }
    Tensor::new([n, k * k, h, w], out).expect("correlation map shape")
}

pub fn correlation_map_vjp<T: Scalar>(
    img: &Tensor<T>,
    k: usize,
    d: usize,
) -> Result<(CorrelationMap<T>, VjpFn<'static, T, Tensor<T>>)> {
    check_window(k, d)?;
    let cen = centered(img)?;
    let map = CorrelationMap {
        map: correlate(&cen, k, d),
        k,
        dilation: d,
    };
    let map_shape = map.map.shape();
    let vjp = Box::new(move |g: &Tensor<T>| {
        if g.shape() != map_shape {
            return Err(crate::error::shape_err!("correlation cotangent {:?}", g.shape()));
        }
        let [n, c, h, w] = cen.shape();
        let plane = h * w;
        let norm = T::one() / T::from_usize(k * k).unwrap();
        let offs = offsets(k, d);
        let mut dcen = vec![T::zero(); cen.len()];
        for ni in 0..n {
            for (t, &(dy, dx)) in offs.iter().enumerate() {
                let gt = &g.data()[(ni * k * k + t) * plane..(ni * k * k + t + 1) * plane];
                for ci in 0..c {
                    let base = (ni * c + ci) * plane;
                    let src = &cen.data()[base..base + plane];
                    let dst = &mut dcen[base..base + plane];
                    for y in 0..h {
                        let ny = y as isize - dy;
                        if ny < 0 || ny >= h as isize {
                            continue;
                        }
                        for x in 0..w {
                            let nx = x as isize - dx;
                            if nx < 0 || nx >= w as isize {
                                continue;
                            }
                            let p = y * w + x;
                            let q = ny as usize * w + nx as usize;
                            let gv = gt[p] * norm;
                            dst[p] = dst[p] + gv * src[q];
                            dst[q] = dst[q] + gv * src[p];
                        }
                    }
                }
            }
        }
        // back through the mean subtraction: subtract the per-channel mean
        let dcen = Tensor::new(cen.shape(), dcen)?;
        let dmean = channel_mean(&dcen)?;
        Ok(Tensor::from_fn(cen.shape(), |ni, ci, y, x| {
            dcen.at(ni, ci, y, x) - dmean.data()[ni * c + ci]
        }))
    });
    Ok((map, vjp))
}

/// Mean absolute difference between the correlation maps of `sr` and `hr`.
pub fn correlation_loss<T: Scalar>(sr: &Tensor<T>, hr: &Tensor<T>, k: usize, d: usize) -> Result<T> {
    sr.expect_same_shape(hr, "correlation_loss")?;
    let a = correlation_map(sr, k, d)?;
    let b = correlation_map(hr, k, d)?;
    let total: T = a
        .map
        .data()
        .iter()
        .zip(b.map.data())
        .map(|(&u, &v)| (u - v).abs())
        .sum();
    Ok(total / T::from_usize(a.map.len().max(1)).unwrap())
}

pub fn correlation_loss_vjp<T: Scalar>(
    sr: &Tensor<T>,
    hr: &Tensor<T>,
    k: usize,
    d: usize,
) -> Result<(T, LossVjp<'static, T>)> {
    sr.expect_same_shape(hr, "correlation_loss")?;
    let (a, back) = correlation_map_vjp(sr, k, d)?;
    let b = correlation_map(hr, k, d)?;
    let count = T::from_usize(a.map.len().max(1)).unwrap();
    let diff = a.map.zip_map(&b.map, |u, v| u - v)?;
    let value = diff.data().iter().map(|v| v.abs()).sum::<T>() / count;
    let vjp = Box::new(move |g: T| {
        let scale = g / count;
        back(&diff.map(|v| scale * sign(v)))
    });
    Ok((value, vjp))
}
