use super::sample::Tap;
use crate::error::{shape_err, Result};
use crate::tensor::{Scalar, Tensor, VjpFn};

#[derive(Clone, Debug)]
pub struct WarpGrads<T> {
    pub x: Tensor<T>,
    pub flow: Tensor<T>,
}

fn check<T: Scalar>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<()> {
    let [n, _, h, w] = x.shape();
    if flow.shape() != [n, 2, h, w] {
        return Err(shape_err!(
            "flow {:?} does not match features {:?} (expected [{n}, 2, {h}, {w}])",
            flow.shape(),
            x.shape()
        ));
    }
    Ok(())
}

fn taps<T: Scalar>(flow: &Tensor<T>) -> Vec<Tap<T>> {
    let [n, _, h, w] = flow.shape();
    let mut out = Vec::with_capacity(n * h * w);
    for ni in 0..n {
        for y in 0..h {
            for x in 0..w {
                let py = T::from_usize(y).unwrap() + flow.at(ni, 0, y, x);
                let px = T::from_usize(x).unwrap() + flow.at(ni, 1, y, x);
                out.push(Tap::new(h, w, py, px));
            }
        }
    }
    out
}

/// `out(p) = bilinear(x, p + flow(p))`, zero outside the image.
/// Flow channel 0 is the row displacement, channel 1 the column one.
pub fn bilinear_warp<T: Scalar>(x: &Tensor<T>, flow: &Tensor<T>) -> Result<Tensor<T>> {
    check(x, flow)?;
    let [n, c, h, w] = x.shape();
    let plane = h * w;
    let taps = taps(flow);
    let mut out = Vec::with_capacity(x.len());
    for ni in 0..n {
        for ci in 0..c {
            let src = &x.data()[(ni * c + ci) * plane..(ni * c + ci + 1) * plane];
            out.extend(taps[ni * plane..(ni + 1) * plane].iter().map(|t| t.sample(src)));
        }
    }
    Tensor::new(x.shape(), out)
}

pub fn bilinear_warp_vjp<T: Scalar>(
    x: &Tensor<T>,
    flow: &Tensor<T>,
) -> Result<(Tensor<T>, VjpFn<'static, T, WarpGrads<T>>)> {
    let out = bilinear_warp(x, flow)?;
    let (x, flow) = (x.clone(), flow.clone());
    let vjp = Box::new(move |g: &Tensor<T>| {
        g.expect_same_shape(&x, "warp cotangent")?;
        let [n, c, h, w] = x.shape();
        let plane = h * w;
        let taps = taps(&flow);
        let mut dx = vec![T::zero(); x.len()];
        let mut dflow = vec![T::zero(); flow.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * plane;
                let src = &x.data()[base..base + plane];
                let gs = &g.data()[base..base + plane];
                let dst = &mut dx[base..base + plane];
                for (p, tap) in taps[ni * plane..(ni + 1) * plane].iter().enumerate() {
                    let gp = gs[p];
                    tap.scatter(dst, gp);
                    let (gy, gx) = tap.grad_pos(src);
                    let fy = (ni * 2) * plane + p;
                    dflow[fy] = dflow[fy] + gp * gy;
                    dflow[fy + plane] = dflow[fy + plane] + gp * gx;
                }
            }
        }
        Ok(WarpGrads {
            x: Tensor::new(x.shape(), dx)?,
            flow: Tensor::new(flow.shape(), dflow)?,
        })
    });
    Ok((out, vjp))
}
