//! Coarse-to-fine block matching, a weight-free stand-in for a learned
//! optical-flow network.

use crate::error::{param_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Per-pixel `(dy, dx)` displacement field `(N, 2, H, W)`, target→source:
/// `target(p) ≈ source(p + flow(p))`.
pub type FlowField<T> = Tensor<T>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockMatchParams {
    pub search_radius: usize,
    pub block: usize,
    pub levels: usize,
}

impl Default for BlockMatchParams {
    fn default() -> Self {
        Self {
            search_radius: 2,
            block: 4,
            levels: 2,
        }
    }
}

/// Single-channel image plane in `f64`.
#[derive(Clone, Debug)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Plane {
    #[inline]
    fn clamped(&self, y: isize, x: isize) -> f64 {
        let y = y.clamp(0, self.h as isize - 1) as usize;
        let x = x.clamp(0, self.w as isize - 1) as usize;
        self.data[y * self.w + x]
    }

    fn halve(&self) -> Option<Plane> {
        let (h, w) = (self.h / 2, self.w / 2);
        if h == 0 || w == 0 {
            return None;
        }
        let mut data = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let s = self.data[2 * y * self.w + 2 * x]
                    + self.data[2 * y * self.w + 2 * x + 1]
                    + self.data[(2 * y + 1) * self.w + 2 * x]
                    + self.data[(2 * y + 1) * self.w + 2 * x + 1];
                data.push(s * 0.25);
            }
        }
        Some(Plane { h, w, data })
    }
}

fn mono<T: Scalar>(t: &Tensor<T>, n: usize) -> Plane {
    let [_, c, h, w] = t.shape();
    let mut data = vec![0.0; h * w];
    for ci in 0..c {
        for (p, d) in data.iter_mut().enumerate() {
            *d += t.data()[(n * c + ci) * h * w + p].to_f64_lossy();
        }
    }
    let inv = 1.0 / c as f64;
    data.iter_mut().for_each(|d| *d *= inv);
    Plane { h, w, data }
}

fn pyramid(base: Plane, levels: usize) -> Vec<Plane> {
    let mut out = vec![base];
    while out.len() < levels {
        match out.last().unwrap().halve() {
            Some(p) => out.push(p),
            None => break,
        }
    }
    out
}

/// Ordering key among equal-SAD candidates: smaller magnitude first, then
/// lexicographic `(dy, dx)`.
fn better(cand: (f64, isize, isize), best: (f64, isize, isize)) -> bool {
    let (sad, dy, dx) = cand;
    let (bsad, bdy, bdx) = best;
    if sad != bsad {
        return sad < bsad;
    }
    let (m, bm) = (dy * dy + dx * dx, bdy * bdy + bdx * bdx);
    if m != bm {
        return m < bm;
    }
    (dy, dx) < (bdy, bdx)
}

fn match_level(src: &Plane, dst: &Plane, prior: &[(isize, isize)], radius: isize, block: usize) -> Vec<(isize, isize)> {
    let (h, w) = (dst.h, dst.w);
    let mut flow = vec![(0isize, 0isize); h * w];
    for by in (0..h).step_by(block) {
        for bx in (0..w).step_by(block) {
            let (ey, ex) = ((by + block).min(h), (bx + block).min(w));
            let (cy, cx) = ((by + ey - 1) / 2, (bx + ex - 1) / 2);
            let (py, px) = prior[cy * w + cx];
            let mut best = (f64::INFINITY, 0isize, 0isize);
            let around_prior = |dy: isize, dx: isize| (dy - py).abs() <= radius && (dx - px).abs() <= radius;
            let (ylo, yhi) = ((py - radius).min(-radius), (py + radius).max(radius));
            let (xlo, xhi) = ((px - radius).min(-radius), (px + radius).max(radius));
            for dy in ylo..=yhi {
                for dx in xlo..=xhi {
                    let near_zero = dy.abs() <= radius && dx.abs() <= radius;
                    if !near_zero && !around_prior(dy, dx) {
                        continue;
                    }
                    let mut sad = 0.0;
                    for y in by..ey {
                        for x in bx..ex {
                            let a = dst.data[y * w + x];
                            let b = src.clamped(y as isize + dy, x as isize + dx);
                            sad += (a - b).abs();
                        }
                    }
                    if better((sad, dy, dx), best) {
                        best = (sad, dy, dx);
                    }
                }
            }
            for y in by..ey {
                for x in bx..ex {
                    flow[y * w + x] = (best.1, best.2);
                }
            }
        }
    }
    flow
}

/// Integer-valued flow mapping `dst` pixels onto `src` content.
///
/// Matching runs from the coarsest of `levels` factor-2 pyramid levels;
/// each finer level searches `±search_radius` around the upsampled,
/// doubled coarse estimate and around zero, by per-block sum of absolute
/// differences on the channel-averaged images. Keeping the zero window
/// means a wrong coarse guess cannot hide a shift within the radius.
pub fn block_match_flow<T: Scalar>(src: &Tensor<T>, dst: &Tensor<T>, params: BlockMatchParams) -> Result<FlowField<T>> {
    if params.search_radius < 1 {
        return Err(param_err!("search radius must be at least 1"));
    }
    if params.block < 1 {
        return Err(param_err!("block size must be at least 1"));
    }
    src.expect_same_shape(dst, "block_match_flow")?;
    let [n, _, h, w] = src.shape();
    let mut out = vec![T::zero(); n * 2 * h * w];
    for ni in 0..n {
        let ps = pyramid(mono(src, ni), params.levels.max(1));
        let pd = pyramid(mono(dst, ni), ps.len());
        let mut flow: Option<(usize, Vec<(isize, isize)>)> = None;
        for lvl in (0..ps.len()).rev() {
            let (lh, lw) = (pd[lvl].h, pd[lvl].w);
            let prior = match &flow {
                None => vec![(0, 0); lh * lw],
                Some((cw, coarse)) => {
                    let ch = coarse.len() / cw;
                    let mut up = Vec::with_capacity(lh * lw);
                    for y in 0..lh {
                        for x in 0..lw {
                            let (dy, dx) = coarse[(y / 2).min(ch - 1) * cw + (x / 2).min(cw - 1)];
                            up.push((2 * dy, 2 * dx));
                        }
                    }
                    up
                }
            };
            let f = match_level(&ps[lvl], &pd[lvl], &prior, params.search_radius as isize, params.block);
            flow = Some((lw, f));
        }
        let (_, f) = flow.expect("at least one level");
        for (p, (dy, dx)) in f.into_iter().enumerate() {
            out[(ni * 2) * h * w + p] = T::from_isize(dy).unwrap();
            out[(ni * 2 + 1) * h * w + p] = T::from_isize(dx).unwrap();
        }
    }
    Tensor::new([n, 2, h, w], out)
}
