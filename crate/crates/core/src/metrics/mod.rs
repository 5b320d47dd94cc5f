//! Image quality and rate-distortion metrics.

mod bdrate;
mod msssim;
mod psnr;

use serde::{Deserialize, Serialize};

pub use bdrate::{bd_rate, fit_log_rate, mixed_bd_rate, overlap, LogRateFit, RdCurve, RdPoint};
pub use msssim::{ms_ssim, ms_ssim_db, scale_count, MS_WEIGHTS};
pub use psnr::{mse, psnr, psnr_from_mse, yuv_psnr, YUV_WEIGHTS};

use crate::error::{Error, Result};
use crate::image::YuvImage;

/// Sum of the per-plane MSEs between two decodes of the same bitstream.
/// Zero exactly when both reconstructions are bit-identical.
pub fn mse_enc_dec(a: &YuvImage, b: &YuvImage) -> Result<f64> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::Metric(format!(
            "reconstruction sizes differ: {}x{} vs {}x{}",
            a.width(),
            a.height(),
            b.width(),
            b.height()
        )));
    }
    a.planes()
        .iter()
        .zip(b.planes())
        .map(|(p, q)| mse(p, q))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    MsSsim,
    YPsnr,
    UPsnr,
    VPsnr,
    YuvPsnr,
}

impl Metric {
    pub const ALL: [Metric; 5] = [
        Metric::MsSsim,
        Metric::YPsnr,
        Metric::UPsnr,
        Metric::VPsnr,
        Metric::YuvPsnr,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::MsSsim => "ms_ssim",
            Metric::YPsnr => "y_psnr",
            Metric::UPsnr => "u_psnr",
            Metric::VPsnr => "v_psnr",
            Metric::YuvPsnr => "yuv_psnr",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityReport {
    pub rate_bpp: f64,
    pub ms_ssim: f64,
    pub y_psnr: f64,
    pub u_psnr: f64,
    pub v_psnr: f64,
    pub yuv_psnr: f64,
}

impl QualityReport {
    pub fn measure(original: &YuvImage, decoded: &YuvImage, rate_bpp: f64) -> Result<Self> {
        if (original.width(), original.height()) != (decoded.width(), decoded.height()) {
            return Err(Error::Metric("decoded image size differs from original".into()));
        }
        let y_psnr = psnr(&original.y, &decoded.y, 255.0)?;
        let u_psnr = psnr(&original.u, &decoded.u, 255.0)?;
        let v_psnr = psnr(&original.v, &decoded.v, 255.0)?;
        Ok(QualityReport {
            rate_bpp,
            ms_ssim: ms_ssim(&original.y, &decoded.y)?,
            y_psnr,
            u_psnr,
            v_psnr,
            yuv_psnr: yuv_psnr(y_psnr, u_psnr, v_psnr),
        })
    }

    /// Quality value on the axis used for rate curves; MS-SSIM is in dB.
    pub fn curve_value(&self, metric: Metric) -> f64 {
        match metric {
            Metric::MsSsim => ms_ssim_db(self.ms_ssim),
            Metric::YPsnr => self.y_psnr,
            Metric::UPsnr => self.u_psnr,
            Metric::VPsnr => self.v_psnr,
            Metric::YuvPsnr => self.yuv_psnr,
        }
    }

    /// Component-wise mean over images; PSNR is averaged in dB.
    pub fn mean(reports: &[QualityReport]) -> Result<QualityReport> {
        if reports.is_empty() {
            return Err(Error::Metric("no reports to average".into()));
        }
        let n = reports.len() as f64;
        let avg = |f: fn(&QualityReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Ok(QualityReport {
            rate_bpp: avg(|r| r.rate_bpp),
            ms_ssim: avg(|r| r.ms_ssim),
            y_psnr: avg(|r| r.y_psnr),
            u_psnr: avg(|r| r.u_psnr),
            v_psnr: avg(|r| r.v_psnr),
            yuv_psnr: avg(|r| r.yuv_psnr),
        })
    }
}

/// Builds one RD curve per metric from reports sorted by rate.
pub fn curve_for(reports: &[QualityReport], metric: Metric) -> Result<RdCurve> {
    let mut sorted = reports.to_vec();
    sorted.sort_by(|a, b| a.rate_bpp.total_cmp(&b.rate_bpp));
    RdCurve::new(
        sorted
            .iter()
            .map(|r| RdPoint {
                rate_bpp: r.rate_bpp,
                quality: r.curve_value(metric),
            })
            .collect(),
    )
}
