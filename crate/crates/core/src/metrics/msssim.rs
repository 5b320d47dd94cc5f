//! Multi-scale structural similarity on the luma plane.

use log::warn;

use crate::error::{Error, Result};
use crate::image::Plane;

pub const MS_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const SIGMA: f64 = 1.5;
const C1: f64 = (0.01 * 255.0) * (0.01 * 255.0);
const C2: f64 = (0.03 * 255.0) * (0.03 * 255.0);

fn gaussian_window() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SIGMA * SIGMA)).exp();
    }
    let sum: f64 = k.iter().sum();
    k.map(|v| v / sum)
}

#[derive(Clone)]
struct Image {
    w: usize,
    h: usize,
    px: Vec<f64>,
}

impl Image {
    /// Separable Gaussian filter, "valid" region only.
    fn blur(&self, kernel: &[f64; WINDOW]) -> Image {
        let ow = self.w - WINDOW + 1;
        let oh = self.h - WINDOW + 1;
        let mut rows = vec![0.0; ow * self.h];
        for y in 0..self.h {
            let src = &self.px[y * self.w..(y + 1) * self.w];
            for x in 0..ow {
                rows[y * ow + x] = kernel.iter().zip(&src[x..x + WINDOW]).map(|(k, v)| k * v).sum();
            }
        }
        let mut px = vec![0.0; ow * oh];
        for y in 0..oh {
            for x in 0..ow {
                px[y * ow + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(i, k)| k * rows[(y + i) * ow + x])
                    .sum();
            }
        }
        Image { w: ow, h: oh, px }
    }

    fn zip(&self, other: &Image, f: impl Fn(f64, f64) -> f64) -> Image {
        Image {
            w: self.w,
            h: self.h,
            px: self.px.iter().zip(&other.px).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    /// 2x2 box average; an odd trailing row/column is dropped.
    fn downsample(&self) -> Image {
        let (w, h) = (self.w / 2, self.h / 2);
        let mut px = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let at = |dx: usize, dy: usize| self.px[(2 * y + dy) * self.w + 2 * x + dx];
                px.push((at(0, 0) + at(1, 0) + at(0, 1) + at(1, 1)) / 4.0);
            }
        }
        Image { w, h, px }
    }
}

/// Mean SSIM and mean contrast-structure term at one scale.
fn scale_terms(a: &Image, b: &Image, kernel: &[f64; WINDOW]) -> (f64, f64) {
    let mu_a = a.blur(kernel);
    let mu_b = b.blur(kernel);
    let aa = a.zip(a, |x, y| x * y).blur(kernel);
    let bb = b.zip(b, |x, y| x * y).blur(kernel);
    let ab = a.zip(b, |x, y| x * y).blur(kernel);
    let n = mu_a.px.len() as f64;
    let mut cs_sum = 0.0;
    let mut ssim_sum = 0.0;
    for i in 0..mu_a.px.len() {
        let (ma, mb) = (mu_a.px[i], mu_b.px[i]);
        let va = aa.px[i] - ma * ma;
        let vb = bb.px[i] - mb * mb;
        let cov = ab.px[i] - ma * mb;
        let l = (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        let cs = (2.0 * cov + C2) / (va + vb + C2);
        cs_sum += cs;
        ssim_sum += l * cs;
    }
    (ssim_sum / n, cs_sum / n)
}

/// Number of scales whose smallest level still fits the 11-tap window.
pub fn scale_count(width: usize, height: usize) -> usize {
    let mut n = 0;
    let (mut w, mut h) = (width, height);
    while n < MS_WEIGHTS.len() && w >= WINDOW && h >= WINDOW {
        n += 1;
        w /= 2;
        h /= 2;
    }
    n
}

/// Five-scale MS-SSIM with the standard constants. Planes smaller than 176
/// pixels on a side use fewer scales (with renormalised weights) and log a
/// warning. Negative contrast terms are clamped to zero, so the result lies in
/// `[0, 1]`.
pub fn ms_ssim(a: &Plane, b: &Plane) -> Result<f64> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Metric(format!(
            "MS-SSIM of {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    let scales = scale_count(a.width, a.height);
    if scales == 0 {
        return Err(Error::Metric(format!(
            "{}x{} is smaller than the {WINDOW}x{WINDOW} window",
            a.width, a.height
        )));
    }
    if scales < MS_WEIGHTS.len() {
        warn!(
            "MS-SSIM on {}x{} uses {scales} of {} scales",
            a.width,
            a.height,
            MS_WEIGHTS.len()
        );
    }
    let weight_sum: f64 = if scales == MS_WEIGHTS.len() {
        1.0
    } else {
        MS_WEIGHTS[..scales].iter().sum()
    };
    let kernel = gaussian_window();
    let to_image = |p: &Plane| Image {
        w: p.width,
        h: p.height,
        px: p.data.iter().map(|&v| v as f64).collect(),
    };
    let (mut x, mut y) = (to_image(a), to_image(b));
    let mut score = 1.0;
    for (s, w) in MS_WEIGHTS[..scales].iter().enumerate() {
        let (ssim, cs) = scale_terms(&x, &y, &kernel);
        let term = if s + 1 == scales { ssim } else { cs };
        score *= term.max(0.0).powf(w / weight_sum);
        if s + 1 < scales {
            x = x.downsample();
            y = y.downsample();
        }
    }
    Ok(score.clamp(0.0, 1.0))
}

/// `-10 log10(1 - v)`: the dB form used when fitting rate curves.
pub fn ms_ssim_db(v: f64) -> f64 {
    -10.0 * (1.0 - v).log10()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texture(w: usize, h: usize, seed: u32) -> Plane {
        let data = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as u32, (i / w) as u32);
                let v = (x * 7 + y * 13 + seed).wrapping_mul(2654435761) >> 24;
                ((v as usize + x as usize * 2) % 256) as u8
            })
            .collect();
        Plane::new(w, h, data).unwrap()
    }

    #[test]
    fn identical_is_one() {
        let a = texture(192, 180, 1);
        assert!((ms_ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn symmetric() {
        let a = texture(180, 176, 1);
        let b = texture(180, 176, 2);
        let ab = ms_ssim(&a, &b).unwrap();
        let ba = ms_ssim(&b, &a).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!((0.0..=1.0).contains(&ab));
    }

    #[test]
    fn scale_counts() {
        assert_eq!(scale_count(176, 176), 5);
        assert_eq!(scale_count(175, 500), 4);
        assert_eq!(scale_count(64, 64), 3);
        assert_eq!(scale_count(10, 64), 0);
        let a = Plane::filled(8, 8, 3);
        assert!(ms_ssim(&a, &a).is_err());
    }
}
