use crate::error::{param_err, Result};
use crate::tensor::{sigmoid, Scalar, Tensor};

const LOG_FLOOR: f64 = 1e-12;

fn neg_mean_log<T: Scalar>(vals: impl Iterator<Item = T>, count: usize) -> T {
    let floor = T::from_f64_lossy(LOG_FLOOR);
    let total: T = vals.map(|v| v.max(floor).ln()).sum();
    -total / T::from_usize(count).unwrap()
}

/// Relativistic average GAN terms from discriminator logits
/// `C(HR)` and `C(SR)`. Returns `(L_adv, L_D)`.
pub fn relativistic_losses<T: Scalar>(logits_hr: &Tensor<T>, logits_sr: &Tensor<T>) -> Result<(T, T)> {
    logits_hr.expect_same_shape(logits_sr, "relativistic_losses")?;
    let count = logits_hr.len();
    if count == 0 {
        return Err(param_err!("relativistic losses need a non-empty batch"));
    }
    let mean_hr = logits_hr.mean();
    let mean_sr = logits_sr.mean();
    // D_Ra(HR, SR) = σ(C(HR) - E[C(SR)]), and 1 - σ(z) = σ(-z).
    let d_real = |c: T| sigmoid(c - mean_sr);
    let d_real_c = |c: T| sigmoid(mean_sr - c);
    let d_fake = |c: T| sigmoid(c - mean_hr);
    let d_fake_c = |c: T| sigmoid(mean_hr - c);
    let hr = logits_hr.data();
    let sr = logits_sr.data();
    let l_adv =
        neg_mean_log(hr.iter().map(|&c| d_real_c(c)), count) + neg_mean_log(sr.iter().map(|&c| d_fake(c)), count);
    let l_d = neg_mean_log(hr.iter().map(|&c| d_real(c)), count) + neg_mean_log(sr.iter().map(|&c| d_fake_c(c)), count);
    Ok((l_adv, l_d))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn batch(v: &[f64]) -> Tensor<f64> {
        Tensor::new([v.len(), 1, 1, 1], v.to_vec()).unwrap()
    }

    #[test]
    fn equal_logits() {
        let a = batch(&[0.3, 0.3, 0.3]);
        let (adv, d) = relativistic_losses(&a, &a).unwrap();
        let expected = -2.0 * 0.5f64.ln();
        assert!((adv - expected).abs() < 1e-12);
        assert!((d - expected).abs() < 1e-12);
        assert!((expected - 1.38629).abs() < 1e-5);
    }

    #[test]
    fn perfect_discriminator() {
        let (adv, d) = relativistic_losses(&batch(&[50.0, 50.0]), &batch(&[-50.0, -50.0])).unwrap();
        assert!(d < 1e-12);
        // saturated generator loss is bounded by the log floor
        assert!((adv + 2.0 * 1e-12f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn swapping_exchanges_terms() {
        let hr = batch(&[0.5, -1.2, 2.0]);
        let sr = batch(&[0.1, 0.7, -0.4]);
        let (adv, d) = relativistic_losses(&hr, &sr).unwrap();
        let (adv2, d2) = relativistic_losses(&sr, &hr).unwrap();
        assert!((adv - d2).abs() < 1e-12);
        assert!((d - adv2).abs() < 1e-12);
    }

    #[test]
    fn empty_batch() {
        let e = Tensor::<f64>::zeros([0, 1, 1, 1]);
        assert!(matches!(relativistic_losses(&e, &e), Err(crate::Error::Parameter(_))));
    }
}
