//! Rate-distortion evaluation of a model against an anchor.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::codec::{decode, encode, ModelGraph};
use crate::error::{Error, Result};
use crate::image::YuvImage;
use crate::metrics::{bd_rate, curve_for, mixed_bd_rate, Metric, QualityReport};
use crate::tensor::Backend;

/// Mean quality of one rate point over an image set; also the row format
/// of curve CSV files.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub rate_point: usize,
    pub rate_bpp: f64,
    pub ms_ssim: f64,
    pub y_psnr: f64,
    pub u_psnr: f64,
    pub v_psnr: f64,
    pub yuv_psnr: f64,
}

impl CurvePoint {
    pub fn new(rate_point: usize, r: QualityReport) -> Self {
        CurvePoint {
            rate_point,
            rate_bpp: r.rate_bpp,
            ms_ssim: r.ms_ssim,
            y_psnr: r.y_psnr,
            u_psnr: r.u_psnr,
            v_psnr: r.v_psnr,
            yuv_psnr: r.yuv_psnr,
        }
    }

    pub fn report(&self) -> QualityReport {
        QualityReport {
            rate_bpp: self.rate_bpp,
            ms_ssim: self.ms_ssim,
            y_psnr: self.y_psnr,
            u_psnr: self.u_psnr,
            v_psnr: self.v_psnr,
            yuv_psnr: self.yuv_psnr,
        }
    }
}

/// BD-rate (percent) per metric, plus the mixed BD-rate of YUV-PSNR and MS-SSIM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdSummary {
    pub ms_ssim: f64,
    pub y_psnr: f64,
    pub u_psnr: f64,
    pub v_psnr: f64,
    pub yuv_psnr: f64,
    pub mixed: f64,
}

/// Encodes and decodes every image at every listed rate point; the rate is
/// the payload after the header.
pub fn rd_curve(
    model: &ModelGraph,
    images: &[(String, YuvImage)],
    rate_points: &[usize],
    backend: Backend,
) -> Result<Vec<CurvePoint>> {
    if images.is_empty() {
        return Err(Error::Config("no images to evaluate".into()));
    }
    rate_points
        .iter()
        .map(|&rp| {
            let reports = images
                .par_iter()
                .map(|(_, img)| {
                    let e = encode(img, model, rp, backend)?;
                    let d = decode(&e.bitstream, model, backend)?;
                    let bpp = e.rate_bits as f64 / (img.width() * img.height()) as f64;
                    QualityReport::measure(img, &d, bpp)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CurvePoint::new(rp, QualityReport::mean(&reports)?))
        })
        .collect()
}

pub fn bd_summary(anchor: &[CurvePoint], test: &[CurvePoint]) -> Result<BdSummary> {
    let a: Vec<QualityReport> = anchor.iter().map(CurvePoint::report).collect();
    let t: Vec<QualityReport> = test.iter().map(CurvePoint::report).collect();
    let bd = |m: Metric| -> Result<f64> { bd_rate(&curve_for(&a, m)?, &curve_for(&t, m)?) };
    let ms_ssim = bd(Metric::MsSsim)?;
    let yuv_psnr = bd(Metric::YuvPsnr)?;
    Ok(BdSummary {
        ms_ssim,
        y_psnr: bd(Metric::YPsnr)?,
        u_psnr: bd(Metric::UPsnr)?,
        v_psnr: bd(Metric::VPsnr)?,
        yuv_psnr,
        mixed: mixed_bd_rate(yuv_psnr, ms_ssim),
    })
}
