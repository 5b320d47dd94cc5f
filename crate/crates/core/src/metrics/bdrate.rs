//! Bjøntegaard delta rate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RdPoint {
    pub rate_bpp: f64,
    pub quality: f64,
}

/// Rate-distortion samples of one codec configuration, strictly increasing in rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RdCurve {
    points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(points: Vec<RdPoint>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Metric("empty RD curve".into()));
        }
        for p in &points {
            if !(p.rate_bpp > 0.0 && p.rate_bpp.is_finite() && p.quality.is_finite()) {
                return Err(Error::Metric(format!("invalid RD point {p:?}")));
            }
        }
        if points.windows(2).any(|w| w[0].rate_bpp >= w[1].rate_bpp) {
            return Err(Error::Metric("RD curve rates must increase strictly".into()));
        }
        Ok(RdCurve { points })
    }

    pub fn from_pairs(pairs: &[(f64, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|&(rate_bpp, quality)| RdPoint { rate_bpp, quality })
                .collect(),
        )
    }

    pub fn points(&self) -> &[RdPoint] {
        &self.points
    }

    pub fn quality_range(&self) -> (f64, f64) {
        self.points
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
                (lo.min(p.quality), hi.max(p.quality))
            })
    }

    pub fn scale_rates(&self, factor: f64) -> Result<RdCurve> {
        RdCurve::new(
            self.points
                .iter()
                .map(|p| RdPoint {
                    rate_bpp: p.rate_bpp * factor,
                    quality: p.quality,
                })
                .collect(),
        )
    }
}

/// Least-squares cubic `ln(rate) = p((q - center) / scale)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRateFit {
    center: f64,
    scale: f64,
    coeffs: [f64; 4],
}

impl LogRateFit {
    pub fn eval(&self, quality: f64) -> f64 {
        let t = (quality - self.center) / self.scale;
        self.coeffs.iter().rev().fold(0.0, |acc, c| acc * t + c)
    }

    /// Exact integral of the fitted polynomial over `[lo, hi]` in quality units.
    pub fn integral(&self, lo: f64, hi: f64) -> f64 {
        let antideriv = |q: f64| {
            let t = (q - self.center) / self.scale;
            self.coeffs
                .iter()
                .enumerate()
                .map(|(i, c)| c * t.powi(i as i32 + 1) / (i as f64 + 1.0))
                .sum::<f64>()
        };
        self.scale * (antideriv(hi) - antideriv(lo))
    }
}

pub fn fit_log_rate(curve: &RdCurve) -> Result<LogRateFit> {
    let pts = curve.points();
    if pts.len() < 4 {
        return Err(Error::Metric(format!(
            "BD-rate needs at least 4 points, curve has {}",
            pts.len()
        )));
    }
    let mut qs: Vec<f64> = pts.iter().map(|p| p.quality).collect();
    qs.sort_by(f64::total_cmp);
    qs.dedup();
    if qs.len() < 4 {
        return Err(Error::Metric(
            "degenerate RD curve: fewer than 4 distinct quality values".into(),
        ));
    }
    let (lo, hi) = curve.quality_range();
    let center = 0.5 * (lo + hi);
    let scale = 0.5 * (hi - lo);
    let design = DMatrix::from_fn(pts.len(), 4, |r, c| ((pts[r].quality - center) / scale).powi(c as i32));
    let target = DVector::from_iterator(pts.len(), pts.iter().map(|p| p.rate_bpp.ln()));
    let svd = design.svd(true, true);
    let sol = svd
        .solve(&target, 1e-12)
        .map_err(|e| Error::Metric(format!("cubic fit failed: {e}")))?;
    Ok(LogRateFit {
        center,
        scale,
        coeffs: [sol[0], sol[1], sol[2], sol[3]],
    })
}

/// Common quality interval of two curves.
pub fn overlap(anchor: &RdCurve, test: &RdCurve) -> Result<(f64, f64)> {
    let (a_lo, a_hi) = anchor.quality_range();
    let (t_lo, t_hi) = test.quality_range();
    let lo = a_lo.max(t_lo);
    let hi = a_hi.min(t_hi);
    if lo >= hi {
        return Err(Error::Metric(format!(
            "no quality overlap: [{a_lo}, {a_hi}] vs [{t_lo}, {t_hi}]"
        )));
    }
    Ok((lo, hi))
}

/// Average bitrate difference of `test` against `anchor` at equal quality,
/// in percent. Positive means `test` needs more bits.
pub fn bd_rate(anchor: &RdCurve, test: &RdCurve) -> Result<f64> {
    let fa = fit_log_rate(anchor)?;
    let ft = fit_log_rate(test)?;
    let (lo, hi) = overlap(anchor, test)?;
    let avg = (ft.integral(lo, hi) - fa.integral(lo, hi)) / (hi - lo);
    Ok((avg.exp() - 1.0) * 100.0)
}

/// Mean of the YUV-PSNR and MS-SSIM BD-rates.
pub fn mixed_bd_rate(bd_yuv_psnr: f64, bd_ms_ssim: f64) -> f64 {
    (bd_yuv_psnr + bd_ms_ssim) / 2.0
}

#[cfg(test)]
mod tests {
    use super::*;

    fn anchor() -> RdCurve {
        RdCurve::from_pairs(&[(0.1, 30.0), (0.2, 33.1), (0.4, 36.0), (0.8, 38.7), (1.4, 40.9)]).unwrap()
    }

    #[test]
    fn identical_curves() {
        let a = anchor();
        assert!(bd_rate(&a, &a).unwrap().abs() < 1e-9);
    }

    #[test]
    fn doubled_rates() {
        let a = anchor();
        let b = a.scale_rates(2.0).unwrap();
        assert!((bd_rate(&a, &b).unwrap() - 100.0).abs() < 1e-6);
        assert!((bd_rate(&b, &a).unwrap() + 50.0).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_curves() {
        assert!(RdCurve::from_pairs(&[(0.2, 1.0), (0.1, 2.0)]).is_err());
        assert!(RdCurve::from_pairs(&[(0.0, 1.0)]).is_err());
        let three = RdCurve::from_pairs(&[(0.1, 1.0), (0.2, 2.0), (0.3, 3.0)]).unwrap();
        assert!(bd_rate(&three, &three).is_err());
        let flat = RdCurve::from_pairs(&[(0.1, 1.0), (0.2, 1.0), (0.3, 1.0), (0.4, 1.0)]).unwrap();
        assert!(bd_rate(&flat, &flat).is_err());
        let far = RdCurve::from_pairs(&[(0.1, 50.0), (0.2, 51.0), (0.3, 52.0), (0.4, 53.0)]).unwrap();
        assert!(matches!(bd_rate(&anchor(), &far), Err(Error::Metric(_))));
    }

    #[test]
    fn mixed_examples() {
        assert_eq!(mixed_bd_rate(2.0, 4.0), 3.0);
        assert_eq!(mixed_bd_rate(0.0, 0.0), 0.0);
        assert_eq!(mixed_bd_rate(0.78, 0.46), 0.62);
    }
}
