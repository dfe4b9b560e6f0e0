//! Content-conditioned aggregation of a set of aligned reference features.
//!
//! Each aligned feature map gets a per-pixel similarity score against the
//! LR features, `μ = σ(⟨g1(F_ref), g2(F_lr)⟩_c)`, and the set is fused as
//! the pixelwise weighted mean `Σ μ_i F_i / Σ μ_i`.
//!
//! The fused value at each element is evaluated over the `(μ_i, F_i)` pairs
//! sorted by value, as `min F + Σ (μ_i / S)(F_i − min F)`, so reordering the
//! set cannot change a single bit and rounding cannot leave the
//! `[min F, max F]` hull.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::diffops::{conv2d_vjp, Conv2dGrads, Conv2dParams};
use crate::error::{param_err, shape_err, Error, Result};
use crate::tensor::{sigmoid, Scalar, Tensor, VjpFn};

#[derive(Clone, Debug, PartialEq)]
pub struct CofaParams<T> {
    /// 1×1, c_f → c_e, applied to the aligned reference features.
    pub g1: Conv2dParams<T>,
    /// 1×1, c_f → c_e, applied to the LR features.
    pub g2: Conv2dParams<T>,
}

#[derive(Clone, Debug)]
pub struct SimilarityGrads<T> {
    pub f_ref: Tensor<T>,
    pub f_lr: Tensor<T>,
    pub g1: Conv2dGrads<T>,
    pub g2: Conv2dGrads<T>,
}

#[derive(Clone, Debug)]
pub struct AggregateGrads<T> {
    pub features: Vec<Tensor<T>>,
    pub scores: Vec<Tensor<T>>,
}

/// How the aligned set is fused.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AggregationMode {
    Cofa,
    Average,
    #[serde(rename = "maxpool")]
    MaxPool,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cofa" => Ok(Self::Cofa),
            "average" => Ok(Self::Average),
            "maxpool" => Ok(Self::MaxPool),
            other => Err(Error::Configuration(format!(
                "unknown aggregation `{other}` (expected cofa, average or maxpool)"
            ))),
        }
    }
}

/// Content-free fusion used by the aggregation ablation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BaselineKind {
    Average,
    MaxPool,
}

pub fn similarity_score<T: Scalar>(f_ref: &Tensor<T>, f_lr: &Tensor<T>, p: &CofaParams<T>) -> Result<Tensor<T>> {
    Ok(similarity_score_vjp(f_ref, f_lr, p)?.0)
}

/// Per-pixel score `(N, 1, H, W)` in `(0, 1)`.
pub fn similarity_score_vjp<T: Scalar>(
    f_ref: &Tensor<T>,
    f_lr: &Tensor<T>,
    p: &CofaParams<T>,
) -> Result<(Tensor<T>, VjpFn<'static, T, SimilarityGrads<T>>)> {
    f_ref.expect_same_shape(f_lr, "similarity_score")?;
    if p.g1.c_out() != p.g2.c_out() {
        return Err(shape_err!(
            "embedding widths differ: {} vs {}",
            p.g1.c_out(),
            p.g2.c_out()
        ));
    }
    let (e1, back1) = conv2d_vjp(f_ref, &p.g1)?;
    let (e2, back2) = conv2d_vjp(f_lr, &p.g2)?;
    let [n, ce, h, w] = e1.shape();
    let plane = h * w;
    let mut score = vec![T::zero(); n * plane];
    for ni in 0..n {
        for c in 0..ce {
            let base = (ni * ce + c) * plane;
            let (a, b) = (&e1.data()[base..base + plane], &e2.data()[base..base + plane]);
            for (p, s) in score[ni * plane..(ni + 1) * plane].iter_mut().enumerate() {
                *s = *s + a[p] * b[p];
            }
        }
    }
    score.iter_mut().for_each(|s| *s = sigmoid(*s));
    let score = Tensor::new([n, 1, h, w], score)?;
    let saved = score.clone();

    let vjp = Box::new(move |g: &Tensor<T>| {
        if g.shape() != saved.shape() {
            return Err(shape_err!("similarity cotangent {:?}", g.shape()));
        }
        let dz: Vec<T> = g
            .data()
            .iter()
            .zip(saved.data())
            .map(|(&g, &s)| g * s * (T::one() - s))
            .collect();
        let mut de1 = vec![T::zero(); e1.len()];
        let mut de2 = vec![T::zero(); e2.len()];
        for ni in 0..n {
            for c in 0..ce {
                let base = (ni * ce + c) * plane;
                for p in 0..plane {
                    let d = dz[ni * plane + p];
                    de1[base + p] = d * e2.data()[base + p];
                    de2[base + p] = d * e1.data()[base + p];
                }
            }
        }
        let g1 = back1(&Tensor::new(e1.shape(), de1)?)?;
        let g2 = back2(&Tensor::new(e2.shape(), de2)?)?;
        Ok(SimilarityGrads {
            f_ref: g1.x.clone(),
            f_lr: g2.x.clone(),
            g1,
            g2,
        })
    });
    Ok((score, vjp))
}

fn check_set<T: Scalar>(aligned: &[Tensor<T>]) -> Result<[usize; 4]> {
    let first = aligned
        .first()
        .ok_or_else(|| param_err!("aggregation needs at least one reference"))?;
    for f in &aligned[1..] {
        f.expect_same_shape(first, "aggregated features")?;
    }
    Ok(first.shape())
}

fn check_scores<T: Scalar>(shape: [usize; 4], aligned: &[Tensor<T>], scores: &[Tensor<T>]) -> Result<()> {
    if scores.len() != aligned.len() {
        return Err(param_err!(
            "{} score maps for {} references",
            scores.len(),
            aligned.len()
        ));
    }
    let want = [shape[0], 1, shape[2], shape[3]];
    for s in scores {
        if s.shape() != want {
            return Err(shape_err!("score map {:?}, expected {:?}", s.shape(), want));
        }
    }
    Ok(())
}

fn by_value<T: Scalar>(a: &(T, T), b: &(T, T)) -> Ordering {
    a.1.to_f64_lossy()
        .total_cmp(&b.1.to_f64_lossy())
        .then(a.0.to_f64_lossy().total_cmp(&b.0.to_f64_lossy()))
}

/// Weighted mean of one element's `(μ, F)` pairs, sorted in place.
fn fuse<T: Scalar>(pairs: &mut [(T, T)]) -> T {
    pairs.sort_by(by_value);
    let lo = pairs[0].1;
    let hi = pairs[pairs.len() - 1].1;
    let total: T = pairs.iter().map(|p| p.0).sum();
    let mut acc = T::zero();
    if total > T::zero() {
        for &(mu, f) in pairs.iter() {
            acc = acc + (mu / total) * (f - lo);
        }
    } else {
        let inv = T::one() / T::from_usize(pairs.len()).unwrap();
        for &(_, f) in pairs.iter() {
            acc = acc + inv * (f - lo);
        }
    }
    (lo + acc).max(lo).min(hi)
}

/// Pixelwise `Σ μ_i F_i / Σ μ_i`; scores `(N, 1, H, W)` broadcast over
/// channels.
pub fn cofa_aggregate<T: Scalar>(aligned: &[Tensor<T>], scores: &[Tensor<T>]) -> Result<Tensor<T>> {
    let shape = check_set(aligned)?;
    check_scores(shape, aligned, scores)?;
    let [n, c, h, w] = shape;
    let plane = h * w;
    let mut pairs = Vec::with_capacity(aligned.len());
    let out = (0..n * c * plane)
        .map(|e| {
            let (ni, p) = (e / (c * plane), e % plane);
            pairs.clear();
            pairs.extend(
                aligned
                    .iter()
                    .zip(scores)
                    .map(|(f, s)| (s.data()[ni * plane + p], f.data()[e])),
            );
            fuse(&mut pairs)
        })
        .collect();
    Tensor::new(shape, out)
}

pub fn cofa_aggregate_vjp<T: Scalar>(
    aligned: &[Tensor<T>],
    scores: &[Tensor<T>],
) -> Result<(Tensor<T>, VjpFn<'static, T, AggregateGrads<T>>)> {
    let fused = cofa_aggregate(aligned, scores)?;
    let shape = fused.shape();
    let aligned = aligned.to_vec();
    let scores = scores.to_vec();
    let out = fused.clone();
    let vjp = Box::new(move |g: &Tensor<T>| {
        if g.shape() != shape {
            return Err(shape_err!("aggregation cotangent {:?}", g.shape()));
        }
        let [n, c, h, w] = shape;
        let plane = h * w;
        let m = aligned.len();
        let mut total = vec![T::zero(); n * plane];
        for s in &scores {
            for (t, &v) in total.iter_mut().zip(s.data()) {
                *t = *t + v;
            }
        }
        let mut dfeat = vec![vec![T::zero(); n * c * plane]; m];
        let mut dscore = vec![vec![T::zero(); n * plane]; m];
        for ni in 0..n {
            for ci in 0..c {
                for p in 0..plane {
                    let e = (ni * c + ci) * plane + p;
                    let q = ni * plane + p;
                    let (gv, fa) = (g.data()[e], fused.data()[e]);
                    if total[q] > T::zero() {
                        let inv = T::one() / total[q];
                        for i in 0..m {
                            let mu = scores[i].data()[q];
                            dfeat[i][e] = gv * mu * inv;
                            dscore[i][q] = dscore[i][q] + gv * (aligned[i].data()[e] - fa) * inv;
                        }
                    } else {
                        let inv = T::one() / T::from_usize(m).unwrap();
                        for d in dfeat.iter_mut() {
                            d[e] = gv * inv;
                        }
                    }
                }
            }
        }
        Ok(AggregateGrads {
            features: dfeat
                .into_iter()
                .map(|d| Tensor::new(shape, d))
                .collect::<Result<_>>()?,
            scores: dscore
                .into_iter()
                .map(|d| Tensor::new([n, 1, h, w], d))
                .collect::<Result<_>>()?,
        })
    });
    Ok((out, vjp))
}

/// Elementwise mean or max across the set.
pub fn aggregate_baseline<T: Scalar>(aligned: &[Tensor<T>], kind: BaselineKind) -> Result<Tensor<T>> {
    Ok(aggregate_baseline_vjp(aligned, kind)?.0)
}

/// Max-pooling routes the cotangent to the first maximal member.
pub fn aggregate_baseline_vjp<T: Scalar>(
    aligned: &[Tensor<T>],
    kind: BaselineKind,
) -> Result<(Tensor<T>, VjpFn<'static, T, Vec<Tensor<T>>>)> {
    let shape = check_set(aligned)?;
    let m = aligned.len();
    let len = aligned[0].len();
    let mut out = vec![T::zero(); len];
    let mut argmax = vec![0usize; len];
    let mut column: Vec<T> = Vec::with_capacity(m);
    for e in 0..len {
        column.clear();
        column.extend(aligned.iter().map(|f| f.data()[e]));
        out[e] = match kind {
            BaselineKind::Average => {
                column.sort_by(|a, b| a.to_f64_lossy().total_cmp(&b.to_f64_lossy()));
                column.iter().copied().sum::<T>() / T::from_usize(m).unwrap()
            }
            BaselineKind::MaxPool => {
                let mut best = 0;
                for (i, &v) in column.iter().enumerate() {
                    if v > column[best] {
                        best = i;
                    }
                }
                argmax[e] = best;
                column[best]
            }
        };
    }
    let out = Tensor::new(shape, out)?;
    let vjp = Box::new(move |g: &Tensor<T>| {
        if g.shape() != shape {
            return Err(shape_err!("aggregation cotangent {:?}", g.shape()));
        }
        match kind {
            BaselineKind::Average => {
                let inv = T::one() / T::from_usize(m).unwrap();
                Ok(vec![g.scale(inv); m])
            }
            BaselineKind::MaxPool => {
                let mut d = vec![vec![T::zero(); len]; m];
                for (e, &i) in argmax.iter().enumerate() {
                    d[i][e] = g.data()[e];
                }
                d.into_iter().map(|v| Tensor::new(shape, v)).collect()
            }
        }
    });
    Ok((out, vjp))
}
