use std::path::Path;

use super::io::save_image;
use crate::error::Result;
use crate::losses::CorrelationMap;
use crate::tensor::{Scalar, Tensor};

const BLUE: [f64; 3] = [0.0, 0.0, 1.0];
const WHITE: [f64; 3] = [1.0, 1.0, 1.0];
const RED: [f64; 3] = [1.0, 0.0, 0.0];

fn lerp(a: [f64; 3], b: [f64; 3], t: f64) -> [f64; 3] {
    [0, 1, 2].map(|i| a[i] + (b[i] - a[i]) * t)
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Renders the first batch item of a correlation map as an RGB image.
///
/// The `k²` displacement channels are averaged, rescaled to `[0, 1]` and
/// coloured blue (low, e.g. edges and fine texture) through white (the
/// median) to red (high, smooth regions). A constant map is all white.
pub fn corrmap_image<T: Scalar>(m: &CorrelationMap<T>) -> Tensor<f64> {
    let t = m.tensor();
    let [_, kk, h, w] = t.shape();
    let mut mean = vec![0.0; h * w];
    for c in 0..kk {
        for y in 0..h {
            for x in 0..w {
                mean[y * w + x] += t.at(0, c, y, x).to_f64_lossy() / kk as f64;
            }
        }
    }
    let lo = mean.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = mean.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let norm: Vec<f64> = if hi > lo {
        mean.iter().map(|v| (v - lo) / (hi - lo)).collect()
    } else {
        vec![0.0; h * w]
    };
    let med = median(&norm);
    let colour = |v: f64| {
        if v < med {
            lerp(BLUE, WHITE, v / med)
        } else if v > med {
            lerp(WHITE, RED, (v - med) / (1.0 - med))
        } else {
            WHITE
        }
    };
    let rgb: Vec<[f64; 3]> = norm.into_iter().map(colour).collect();
    Tensor::from_fn([1, 3, h, w], |_, c, y, x| rgb[y * w + x][c])
}

pub fn corrmap_visualize<T: Scalar>(m: &CorrelationMap<T>, path: impl AsRef<Path>) -> Result<()> {
    save_image(&corrmap_image(m), path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::correlation_map;

    #[test]
    fn constant_image_renders_uniform_white() {
        let img = Tensor::<f64>::full([1, 3, 8, 8], 0.4);
        let m = correlation_map(&img, 3, 1).unwrap();
        assert!(m.tensor().data().iter().all(|&v| v == 0.0));
        let vis = corrmap_image(&m);
        assert!(vis.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn colours_span_the_map() {
        let img = Tensor::<f64>::from_fn([1, 3, 12, 12], |_, c, y, x| ((x * 7 + y * 3 + c) % 5) as f64 / 4.0);
        let vis = corrmap_image(&correlation_map(&img, 3, 1).unwrap());
        // somewhere pure blue and somewhere pure red
        let px = |y, x| [vis.at(0, 0, y, x), vis.at(0, 1, y, x), vis.at(0, 2, y, x)];
        let all: Vec<_> = (0..12)
            .flat_map(|y| (0..12).map(move |x| (y, x)))
            .map(|(y, x)| px(y, x))
            .collect();
        assert!(all.contains(&BLUE));
        assert!(all.contains(&RED));
    }

    #[test]
    fn median_even_and_odd() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}
