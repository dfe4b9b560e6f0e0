//! Synthetic multi-exemplar super-resolution data.
//!
//! Each sample renders a procedural texture (smooth colour blobs plus
//! oriented fine luminance gratings) as the HR image. References show the
//! same texture under random similarity transforms; the LR input is the
//! bicubic downscale of the HR image.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffops::{bicubic_resize, Scale};
use crate::error::{param_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Horizontal-flip augmentation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipMode {
    None,
    /// With probability 1/2 flip either the LR/HR pair or the references,
    /// never both.
    Uneven,
    /// With probability 1/2 flip the LR/HR pair and every reference.
    Even,
}

impl std::str::FromStr for FlipMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FlipMode::None),
            "uneven" => Ok(FlipMode::Uneven),
            "even" => Ok(FlipMode::Even),
            other => Err(Error::Configuration(format!(
                "unknown flip mode `{other}` (expected none, uneven or even)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    /// HR side length in pixels.
    pub hr_size: usize,
    pub scale: usize,
    pub n_refs: usize,
    /// Largest reference translation, HR pixels.
    pub max_translation: f64,
    /// Largest reference rotation, degrees.
    pub max_rotation_deg: f64,
    /// Reference zoom range.
    pub min_zoom: f64,
    pub max_zoom: f64,
    pub seed: u64,
    pub flip_mode: FlipMode,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            hr_size: 64,
            scale: 4,
            n_refs: 3,
            max_translation: 0.5,
            max_rotation_deg: 1.0,
            min_zoom: 0.99,
            max_zoom: 1.01,
            seed: 0,
            flip_mode: FlipMode::None,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 || self.hr_size == 0 || !self.hr_size.is_multiple_of(self.scale) {
            return Err(param_err!(
                "HR size {} must be a positive multiple of scale {}",
                self.hr_size,
                self.scale
            ));
        }
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.max_translation) || !ok(self.max_rotation_deg) {
            return Err(param_err!("transform ranges must be finite and non-negative"));
        }
        if !(self.min_zoom > 0.0 && self.min_zoom <= self.max_zoom && self.max_zoom.is_finite()) {
            return Err(param_err!(
                "zoom range [{}, {}] is invalid",
                self.min_zoom,
                self.max_zoom
            ));
        }
        Ok(())
    }
}

/// One training example.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub refs: Vec<Tensor<T>>,
}

/// A batch stacked along N; `refs[i]` holds the i-th reference of every
/// sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub lr: Tensor<T>,
    pub hr: Tensor<T>,
    pub refs: Vec<Tensor<T>>,
}

struct Blob {
    cy: f64,
    cx: f64,
    inv_2s2: f64,
    colour: [f64; 3],
}

struct Grating {
    ky: f64,
    kx: f64,
    phase: f64,
    amp: f64,
    env: Blob,
}

struct Texture {
    base: [f64; 3],
    blobs: Vec<Blob>,
    gratings: Vec<Grating>,
}

impl Texture {
    fn random(rng: &mut ChaCha8Rng, size: f64) -> Self {
        let blob = |rng: &mut ChaCha8Rng, lo: f64, hi: f64, amp: f64| {
            let s = rng.random_range(lo..hi) * size;
            Blob {
                cy: rng.random_range(0.0..size),
                cx: rng.random_range(0.0..size),
                inv_2s2: 1.0 / (2.0 * s * s),
                colour: [
                    rng.random_range(-amp..amp),
                    rng.random_range(-amp..amp),
                    rng.random_range(-amp..amp),
                ],
            }
        };
        let base = [
            rng.random_range(0.35..0.65),
            rng.random_range(0.35..0.65),
            rng.random_range(0.35..0.65),
        ];
        let blobs = (0..5).map(|_| blob(rng, 0.12, 0.3, 0.3)).collect();
        let gratings = (0..2)
            .map(|_| {
                let theta = rng.random_range(0.0..std::f64::consts::PI);
                let period = rng.random_range(3.0..6.0);
                let k = std::f64::consts::TAU / period;
                Grating {
                    ky: k * theta.sin(),
                    kx: k * theta.cos(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: rng.random_range(0.08..0.16),
                    env: blob(rng, 0.25, 0.45, 1.0),
                }
            })
            .collect();
        Self { base, blobs, gratings }
    }

    fn render(&self, size: usize) -> Tensor<f64> {
        let mut img = Tensor::from_fn([1, 3, size, size], |_, c, _, _| self.base[c]);
        let plane = size * size;
        let data = img.data_mut();
        for y in 0..size {
            for x in 0..size {
                let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
                let mut rgb = [0.0; 3];
                for b in &self.blobs {
                    let e = (-((fy - b.cy).powi(2) + (fx - b.cx).powi(2)) * b.inv_2s2).exp();
                    for (v, c) in rgb.iter_mut().zip(b.colour) {
                        *v += c * e;
                    }
                }
                let mut lum = 0.0;
                for g in &self.gratings {
                    let env = (-((fy - g.env.cy).powi(2) + (fx - g.env.cx).powi(2)) * g.env.inv_2s2).exp();
                    lum += g.amp * env * (g.ky * fy + g.kx * fx + g.phase).sin();
                }
                for (c, v) in rgb.iter().enumerate() {
                    let p = &mut data[c * plane + y * size + x];
                    *p = (*p + v + lum).clamp(0.0, 1.0);
                }
            }
        }
        img
    }
}

/// Similarity transform about the image centre, sampled bilinearly with
/// clamped edges: `out(p) = img(c + zoom·R(θ)(p − c) + t)`.
fn transform(img: &Tensor<f64>, theta: f64, zoom: f64, ty: f64, tx: f64) -> Tensor<f64> {
    let [_, c, h, w] = img.shape();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sn, cs) = theta.sin_cos();
    let clampy = |v: isize| v.clamp(0, h as isize - 1) as usize;
    let clampx = |v: isize| v.clamp(0, w as isize - 1) as usize;
    Tensor::from_fn([1, c, h, w], |_, ci, y, x| {
        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
        let sy = cy + zoom * (cs * dy + sn * dx) + ty;
        let sx = cx + zoom * (-sn * dy + cs * dx) + tx;
        let (y0, x0) = (sy.floor(), sx.floor());
        let (fy, fx) = (sy - y0, sx - x0);
        let (y0, x0) = (y0 as isize, x0 as isize);
        let at = |yy: isize, xx: isize| img.at(0, ci, clampy(yy), clampx(xx));
        (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1))
            + fy * ((1.0 - fx) * at(y0 + 1, x0) + fx * at(y0 + 1, x0 + 1))
    })
}

fn sym(rng: &mut ChaCha8Rng, r: f64) -> f64 {
    if r > 0.0 {
        rng.random_range(-r..=r)
    } else {
        0.0
    }
}

/// The `index`-th sample of the stream. Samples are independent of each
/// other and of `n_refs` except for the number of references drawn, so a
/// one-reference stream is a prefix-subset of a three-reference one.
pub fn synth_sample<T: Scalar>(spec: &SynthSpec, index: u64) -> Result<Sample<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(index);
    let texture = Texture::random(&mut rng, spec.hr_size as f64);
    let (flip_draw, side_draw): (bool, bool) = (rng.random(), rng.random());
    let hr = texture.render(spec.hr_size);
    let mut refs = Vec::with_capacity(spec.n_refs);
    for _ in 0..spec.n_refs {
        let theta = sym(&mut rng, spec.max_rotation_deg).to_radians();
        let zoom = if spec.max_zoom > spec.min_zoom {
            rng.random_range(spec.min_zoom..=spec.max_zoom)
        } else {
            spec.min_zoom
        };
        let ty = sym(&mut rng, spec.max_translation);
        let tx = sym(&mut rng, spec.max_translation);
        refs.push(transform(&hr, theta, zoom, ty, tx));
    }
    let mut lr = bicubic_resize(&hr, Scale::down(spec.scale as u32)?)?;
    let mut hr = hr;
    let (flip_pair, flip_refs) = match spec.flip_mode {
        FlipMode::None => (false, false),
        FlipMode::Even => (flip_draw, flip_draw),
        FlipMode::Uneven => (flip_draw && side_draw, flip_draw && !side_draw),
    };
    if flip_pair {
        lr = lr.flip_horizontal();
        hr = hr.flip_horizontal();
    }
    if flip_refs {
        for r in &mut refs {
            *r = r.flip_horizontal();
        }
    }
    Ok(Sample {
        lr: lr.cast(),
        hr: hr.cast(),
        refs: refs.iter().map(Tensor::cast).collect(),
    })
}

/// Samples `start..start + size` stacked into one batch.
pub fn synth_batch<T: Scalar>(spec: &SynthSpec, start: u64, size: usize) -> Result<Batch<T>> {
    let samples = (0..size as u64)
        .map(|i| synth_sample::<T>(spec, start + i))
        .collect::<Result<Vec<_>>>()?;
    let lr = Tensor::stack_batch(&samples.iter().map(|s| s.lr.clone()).collect::<Vec<_>>())?;
    let hr = Tensor::stack_batch(&samples.iter().map(|s| s.hr.clone()).collect::<Vec<_>>())?;
    let refs = (0..spec.n_refs)
        .map(|i| Tensor::stack_batch(&samples.iter().map(|s| s.refs[i].clone()).collect::<Vec<_>>()))
        .collect::<Result<_>>()?;
    Ok(Batch { lr, hr, refs })
}
