//! Reference feature alignment.
//!
//! The large variant warps the reference features with an externally
//! estimated flow, predicts a residual offset from `[warped ‖ lr]`, and
//! samples the reference features with a deformable convolution at
//! `flow + residual`. The small variant predicts the offsets from
//! `[ref ‖ lr]` directly. `Conv` disables offsets entirely (plain
//! convolution), the zero-offset special case used as an ablation.

use serde::{Deserialize, Serialize};

use crate::diffops::{
    bilinear_warp_vjp, broadcast_flow_to_offsets, conv2d_vjp, deformable_conv_vjp, reduce_offsets_to_flow, Conv2dGrads,
    Conv2dParams,
};
use crate::error::{shape_err, Error, Result};
use crate::tensor::{activation_vjp, Activation, Scalar, Tensor, VjpFn};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RfaMode {
    /// Plain convolution of the reference features (no offsets).
    Conv,
    /// Deformable sampling with offsets predicted from `[ref ‖ lr]`.
    Small,
    /// Flow-guided deformable sampling.
    Large,
}

impl std::str::FromStr for RfaMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "conv" => Ok(RfaMode::Conv),
            "small" => Ok(RfaMode::Small),
            "large" => Ok(RfaMode::Large),
            other => Err(Error::Configuration(format!(
                "unknown RFA mode `{other}` (expected conv, small or large)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RfaParams<T> {
    /// `[ref ‖ lr]` (2·c_f) → c_f, 3×3.
    pub offset1: Conv2dParams<T>,
    /// c_f → 2·K², 3×3.
    pub offset2: Conv2dParams<T>,
    /// Deformable sampling kernel, c_f → c_f, K×K.
    pub dconv: Conv2dParams<T>,
    pub mode: RfaMode,
}

#[derive(Clone, Debug)]
pub struct RfaGrads<T> {
    pub f_ref: Tensor<T>,
    pub f_lr: Tensor<T>,
    pub offset1: Conv2dGrads<T>,
    pub offset2: Conv2dGrads<T>,
    pub dconv: Conv2dGrads<T>,
}

fn zero_grads<T: Scalar>(p: &Conv2dParams<T>) -> Conv2dGrads<T> {
    Conv2dGrads {
        x: Tensor::zeros([0, 0, 0, 0]),
        weight: p.weight.zeros_like(),
        bias: p.bias.zeros_like(),
    }
}

impl<T: Scalar> RfaParams<T> {
    fn validate(&self, f_ref: &Tensor<T>, f_lr: &Tensor<T>, flow: Option<&Tensor<T>>) -> Result<()> {
        f_ref.expect_same_shape(f_lr, "rfa_align features")?;
        let k = self.dconv.kernel();
        if self.offset2.c_out() != 2 * k * k {
            return Err(shape_err!(
                "offset net emits {} channels, deformable kernel {k}x{k} needs {}",
                self.offset2.c_out(),
                2 * k * k
            ));
        }
        match (self.mode, flow) {
            (RfaMode::Large, None) => Err(Error::Configuration(
                "large RFA needs a flow field for every reference".into(),
            )),
            (RfaMode::Conv | RfaMode::Small, Some(_)) => Err(Error::Configuration(format!(
                "{:?} RFA does not take a flow field",
                self.mode
            ))),
            _ => Ok(()),
        }
    }
}

/// Aligns `f_ref` to the content of `f_lr`.
pub fn rfa_align<T: Scalar>(
    f_ref: &Tensor<T>,
    f_lr: &Tensor<T>,
    flow: Option<&Tensor<T>>,
    p: &RfaParams<T>,
) -> Result<Tensor<T>> {
    Ok(rfa_align_vjp(f_ref, f_lr, flow, p)?.0)
}

/// As [`rfa_align`], with the vjp over both feature maps and every weight.
/// The flow is a constant.
pub fn rfa_align_vjp<T: Scalar>(
    f_ref: &Tensor<T>,
    f_lr: &Tensor<T>,
    flow: Option<&Tensor<T>>,
    p: &RfaParams<T>,
) -> Result<(Tensor<T>, VjpFn<'static, T, RfaGrads<T>>)> {
    p.validate(f_ref, f_lr, flow)?;
    let c_f = f_ref.shape()[1];

    if p.mode == RfaMode::Conv {
        let (out, back) = conv2d_vjp(f_ref, &p.dconv)?;
        let (o1, o2) = (zero_grads(&p.offset1), zero_grads(&p.offset2));
        let lr_shape = f_lr.shape();
        let vjp = Box::new(move |g: &Tensor<T>| {
            let dconv = back(g)?;
            Ok(RfaGrads {
                f_ref: dconv.x.clone(),
                f_lr: Tensor::zeros(lr_shape),
                offset1: o1.clone(),
                offset2: o2.clone(),
                dconv,
            })
        });
        return Ok((out, vjp));
    }

    let k = p.dconv.kernel();
    let (guide, back_warp) = match flow {
        Some(flow) => {
            let (w, back) = bilinear_warp_vjp(f_ref, flow)?;
            (w, Some(back))
        }
        None => (f_ref.clone(), None),
    };
    let cat = Tensor::concat_channels(&[&guide, f_lr])?;
    let (h1, back1) = conv2d_vjp(&cat, &p.offset1)?;
    let (a1, back_relu) = activation_vjp(&h1, Activation::Relu);
    let (residual, back2) = conv2d_vjp(&a1, &p.offset2)?;
    let offsets = match flow {
        Some(flow) => residual.zip_map(&broadcast_flow_to_offsets(flow, k)?, |a, b| a + b)?,
        None => residual,
    };
    let (out, back_dconv) = deformable_conv_vjp(f_ref, &p.dconv, &offsets)?;

    let vjp = Box::new(move |g: &Tensor<T>| {
        let dc = back_dconv(g)?;
        let offset2 = back2(&dc.offsets)?;
        let da1 = back_relu(&offset2.x)?;
        let offset1 = back1(&da1)?;
        let mut parts = offset1.x.split_channels(&[c_f, c_f])?.into_iter();
        let d_guide = parts.next().unwrap();
        let d_lr = parts.next().unwrap();
        let mut d_ref = dc.x.clone();
        match &back_warp {
            Some(back) => d_ref.add_assign(&back(&d_guide)?.x)?,
            None => d_ref.add_assign(&d_guide)?,
        }
        Ok(RfaGrads {
            f_ref: d_ref,
            f_lr: d_lr,
            offset1,
            offset2,
            dconv: Conv2dGrads {
                x: dc.x,
                weight: dc.weight,
                bias: dc.bias,
            },
        })
    });
    Ok((out, vjp))
}

/// Sum of the offset cotangent over taps, i.e. what a differentiable flow
/// source would receive. Exposed for diagnostics; the flow itself is
/// treated as a constant during training.
pub fn flow_cotangent<T: Scalar>(doffsets: &Tensor<T>) -> Tensor<T> {
    reduce_offsets_to_flow(doffsets)
}
