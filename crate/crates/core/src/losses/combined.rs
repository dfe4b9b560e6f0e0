use serde::{Deserialize, Serialize};

use super::{charbonnier_vjp, correlation_loss_vjp, feature_l1_vjp, relativistic_losses};
use crate::error::{param_err, Result};
use crate::tensor::{s, Scalar, Tensor};

/// Weights of the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_adv: f64,
    pub lambda_per: f64,
    pub lambda_cor: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_adv: 0.1,
            lambda_per: 0.01,
            lambda_cor: 0.1,
        }
    }
}

impl LossWeights {
    /// Reconstruction-oriented training: Charbonnier only.
    pub fn reconstruction_only() -> Self {
        Self {
            lambda_rec: 1.0,
            lambda_adv: 0.0,
            lambda_per: 0.0,
            lambda_cor: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_rec", self.lambda_rec),
            ("lambda_adv", self.lambda_adv),
            ("lambda_per", self.lambda_per),
            ("lambda_cor", self.lambda_cor),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(param_err!("{name} must be a non-negative finite number, got {v}"));
            }
        }
        Ok(())
    }
}

/// Unweighted term values plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub rec: f64,
    pub cor: f64,
    pub per: Option<f64>,
    pub adv: Option<f64>,
    pub total: f64,
}

#[derive(Clone, Debug)]
pub struct CombinedGrads<T> {
    pub sr: Tensor<T>,
    /// Cotangent of the SR-side features, when a perceptual pair was given.
    pub fea_sr: Option<Tensor<T>>,
}

pub type CombinedVjp<'a, T> = Box<dyn Fn(T) -> Result<CombinedGrads<T>> + 'a>;

/// `λ_rec·L_rec + λ_adv·L_adv + λ_per·L_per + λ_cor·L_cor`.
///
/// `feats` is `(Fea_SR, Fea_HR)` and `logits` is `(C(HR), C(SR))`; each
/// optional term contributes only when its inputs are supplied.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<T: Scalar>(
    sr: &Tensor<T>,
    hr: &Tensor<T>,
    feats: Option<(&Tensor<T>, &Tensor<T>)>,
    logits: Option<(&Tensor<T>, &Tensor<T>)>,
    w: &LossWeights,
    k: usize,
    d: usize,
) -> Result<LossBreakdown> {
    Ok(combined_loss_vjp(sr, hr, feats, logits, w, k, d)?.0)
}

/// As [`combined_loss`], with the vjp over `sr` and `Fea_SR`. The
/// adversarial term contributes to the value only: its gradient needs a
/// discriminator, which this crate does not model.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_vjp<T: Scalar>(
    sr: &Tensor<T>,
    hr: &Tensor<T>,
    feats: Option<(&Tensor<T>, &Tensor<T>)>,
    logits: Option<(&Tensor<T>, &Tensor<T>)>,
    w: &LossWeights,
    k: usize,
    d: usize,
) -> Result<(LossBreakdown, CombinedVjp<'static, T>)> {
    w.validate()?;
    sr.expect_same_shape(hr, "combined_loss")?;
    let mut out = LossBreakdown::default();

    let rec = if w.lambda_rec > 0.0 {
        let (v, back) = charbonnier_vjp(sr, hr, s(super::DEFAULT_CHARBONNIER_EPS))?;
        out.rec = v.to_f64_lossy();
        Some(back)
    } else {
        None
    };
    let cor = if w.lambda_cor > 0.0 {
        let (v, back) = correlation_loss_vjp(sr, hr, k, d)?;
        out.cor = v.to_f64_lossy();
        Some(back)
    } else {
        None
    };
    let per = match feats {
        Some((fs, fh)) => {
            let (v, back) = feature_l1_vjp(fs, fh)?;
            out.per = Some(v.to_f64_lossy());
            Some(back)
        }
        None => None,
    };
    if let Some((lh, ls)) = logits {
        let (adv, _) = relativistic_losses(lh, ls)?;
        out.adv = Some(adv.to_f64_lossy());
    }
    out.total = w.lambda_rec * out.rec
        + w.lambda_cor * out.cor
        + w.lambda_per * out.per.unwrap_or(0.0)
        + w.lambda_adv * out.adv.unwrap_or(0.0);

    let weights = *w;
    let shape = sr.shape();
    let vjp = Box::new(move |g: T| {
        let mut dsr = Tensor::zeros(shape);
        if let Some(back) = &rec {
            dsr.add_assign(&back(g * s(weights.lambda_rec))?)?;
        }
        if let Some(back) = &cor {
            dsr.add_assign(&back(g * s(weights.lambda_cor))?)?;
        }
        let fea_sr = match &per {
            Some(back) => Some(back(g * s(weights.lambda_per))?),
            None => None,
        };
        Ok(CombinedGrads { sr: dsr, fea_sr })
    });
    Ok((out, vjp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::charbonnier;

    fn img(seed: f64) -> Tensor<f64> {
        Tensor::from_fn([1, 3, 6, 6], |_, c, y, x| {
            0.5 + 0.4 * ((c * 36 + y * 6 + x) as f64 * 0.3 + seed).sin()
        })
    }

    #[test]
    fn identical_inputs_default_weights() {
        let x = img(0.0);
        let b = combined_loss(&x, &x, None, None, &LossWeights::default(), 3, 1).unwrap();
        assert!((b.total - 1e-3).abs() < 1e-15);
        assert_eq!(b.cor, 0.0);
        assert!(b.per.is_none() && b.adv.is_none());
    }

    #[test]
    fn zero_weights() {
        let z = LossWeights {
            lambda_rec: 0.0,
            lambda_adv: 0.0,
            lambda_per: 0.0,
            lambda_cor: 0.0,
        };
        let (a, b) = (img(0.0), img(1.0));
        let logits = Tensor::full([1, 1, 1, 1], 0.0);
        let out = combined_loss(&a, &b, Some((&a, &b)), Some((&logits, &logits)), &z, 3, 1).unwrap();
        assert_eq!(out.total, 0.0);
    }

    #[test]
    fn reconstruction_only_is_charbonnier() {
        let (a, b) = (img(0.0), img(1.0));
        let out = combined_loss(&a, &b, None, None, &LossWeights::reconstruction_only(), 3, 1).unwrap();
        assert_eq!(out.total, charbonnier(&a, &b, 1e-3).unwrap());
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_cor: -0.1,
            ..LossWeights::default()
        };
        let a = img(0.0);
        assert!(matches!(
            combined_loss(&a, &a, None, None, &w, 3, 1),
            Err(crate::Error::Parameter(_))
        ));
    }

    #[test]
    fn correlation_term_changes_gradient() {
        let (a, b) = (img(0.0), img(0.7));
        let (_, g1) = combined_loss_vjp(&a, &b, None, None, &LossWeights::reconstruction_only(), 3, 1).unwrap();
        let w = LossWeights {
            lambda_cor: 0.1,
            ..LossWeights::reconstruction_only()
        };
        let (_, g2) = combined_loss_vjp(&a, &b, None, None, &w, 3, 1).unwrap();
        let d = g1(1.0).unwrap().sr.zip_map(&g2(1.0).unwrap().sr, |u, v| u - v).unwrap();
        assert!(d.dot(&d).unwrap().sqrt() > 1e-8);
    }
}
