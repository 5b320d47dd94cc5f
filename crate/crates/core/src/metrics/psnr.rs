use crate::error::{Error, Result};
use crate::image::Plane;

fn check_dims(a: &Plane, b: &Plane) -> Result<()> {
    if (a.width, a.height) != (b.width, b.height) {
        return Err(Error::Metric(format!(
            "plane size {}x{} vs {}x{}",
            a.width, a.height, b.width, b.height
        )));
    }
    Ok(())
}

pub fn mse(a: &Plane, b: &Plane) -> Result<f64> {
    check_dims(a, b)?;
    if a.data.is_empty() {
        return Err(Error::Metric("empty plane".into()));
    }
    let sse: u64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| {
            let d = x as i64 - y as i64;
            (d * d) as u64
        })
        .sum();
    Ok(sse as f64 / a.data.len() as f64)
}

/// `10 log10(peak^2 / MSE)`. Identical planes give `f64::INFINITY`, which
/// callers treat as the "identical" flag.
pub fn psnr(a: &Plane, b: &Plane, peak: f64) -> Result<f64> {
    let m = mse(a, b)?;
    Ok(psnr_from_mse(m, peak))
}

pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (peak * peak / mse).log10()
    }
}

pub const YUV_WEIGHTS: [f64; 3] = [0.8, 0.1, 0.1];

/// Combined YUV-PSNR, weighted in the dB domain. Any infinite component makes
/// the result infinite.
pub fn yuv_psnr(y_db: f64, u_db: f64, v_db: f64) -> f64 {
    if [y_db, u_db, v_db].iter().any(|v| v.is_infinite()) {
        return f64::INFINITY;
    }
    YUV_WEIGHTS[0] * y_db + YUV_WEIGHTS[1] * u_db + YUV_WEIGHTS[2] * v_db
}
