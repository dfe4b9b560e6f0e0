use crate::diffops::{bicubic_resize, Scale};
use crate::error::{param_err, shape_err, Result};
use crate::tensor::{Scalar, Tensor};

/// `10·log10(peak² / MSE)` over every element; `+∞` for identical inputs.
pub fn psnr<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, peak: f64) -> Result<f64> {
    a.expect_same_shape(b, "psnr")?;
    let se: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let d = x.to_f64_lossy() - y.to_f64_lossy();
            d * d
        })
        .sum();
    let mse = se / a.len().max(1) as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

/// PSNR as written to CSV files: infinite values become `inf`.
pub fn format_psnr(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.4}")
    }
}

pub const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut g = [0.0; SSIM_WINDOW];
    let r = (SSIM_WINDOW / 2) as f64;
    for (i, v) in g.iter_mut().enumerate() {
        let x = i as f64 - r;
        *v = (-x * x / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let sum: f64 = g.iter().sum();
    g.map(|v| v / sum)
}

/// Separable "valid" filtering of one `h x w` plane.
fn filter_valid(p: &[f64], h: usize, w: usize, g: &[f64]) -> Vec<f64> {
    let k = g.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|i| g[i] * p[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|i| g[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM with an 11x11 Gaussian window (σ = 1.5), K1 = 0.01,
/// K2 = 0.03 and dynamic range 1, computed per channel without padding and
/// averaged over channels and batch.
pub fn ssim<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    a.expect_same_shape(b, "ssim")?;
    let [n, c, h, w] = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(param_err!(
            "ssim needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        ));
    }
    let g = gaussian_window();
    let plane = h * w;
    let (av, bv) = (a.to_f64_vec(), b.to_f64_vec());
    let mut total = 0.0;
    let mut count = 0usize;
    for i in 0..n * c {
        let pa = &av[i * plane..(i + 1) * plane];
        let pb = &bv[i * plane..(i + 1) * plane];
        let prod = |f: fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<_>>();
        let mu_a = filter_valid(pa, h, w, &g);
        let mu_b = filter_valid(pb, h, w, &g);
        let aa = filter_valid(&prod(|x, _| x * x), h, w, &g);
        let bb = filter_valid(&prod(|_, y| y * y), h, w, &g);
        let ab = filter_valid(&prod(|x, y| x * y), h, w, &g);
        for j in 0..mu_a.len() {
            let (ma, mb) = (mu_a[j], mu_b[j]);
            let va = aa[j] - ma * ma;
            let vb = bb[j] - mb * mb;
            let cov = ab[j] - ma * mb;
            total += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Bicubic downscale by an integer factor `s`.
pub fn make_lr<T: Scalar>(hr: &Tensor<T>, s: usize) -> Result<Tensor<T>> {
    let [_, _, h, w] = hr.shape();
    if s == 0 || h % s != 0 || w % s != 0 {
        return Err(shape_err!("image {h}x{w} is not divisible by scale {s}"));
    }
    bicubic_resize(hr, Scale::down(s as u32)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(seed: f64) -> Tensor<f64> {
        Tensor::from_fn([1, 3, 16, 16], |_, c, y, x| {
            0.5 + 0.4 * (seed + c as f64 + 0.7 * y as f64 + 0.3 * (x * x) as f64).sin()
        })
    }

    #[test]
    fn psnr_closed_form() {
        let a = Tensor::<f64>::zeros([1, 3, 4, 4]);
        let b = Tensor::full([1, 3, 4, 4], 0.1);
        assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-12);
        assert_eq!(psnr(&a, &a, 1.0).unwrap(), f64::INFINITY);
        assert_eq!(format_psnr(f64::INFINITY), "inf");
        assert!(psnr(&a, &Tensor::zeros([1, 3, 4, 5]), 1.0).is_err());
    }

    #[test]
    fn ssim_basics() {
        let a = img(0.0);
        let b = img(0.4);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let inv = a.map(|v| 1.0 - v);
        assert!(ssim(&a, &inv).unwrap() < 1.0);
        assert_eq!(ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        let small = Tensor::<f64>::zeros([1, 3, 10, 16]);
        assert!(matches!(ssim(&small, &small), Err(crate::Error::Parameter(_))));
    }

    #[test]
    fn ssim_window_is_normalised() {
        let g = gaussian_window();
        assert!((g.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(g[0], g[10]);
    }

    #[test]
    fn make_lr_shapes() {
        let hr = Tensor::<f64>::full([1, 3, 64, 64], 0.3);
        let lr = make_lr(&hr, 4).unwrap();
        assert_eq!(lr.shape(), [1, 3, 16, 16]);
        assert!(lr.data().iter().all(|&v| (v - 0.3).abs() < 1e-12));
        assert!(make_lr(&Tensor::<f64>::zeros([1, 3, 30, 32]), 4).is_err());
    }
}
