//! Per-channel gain units.

use super::model::RatePoint;
use crate::error::{Error, Result};
use crate::tensor::{requantize, AccTensor, ActSpec, FloatTensor, QTensor};

fn check_channels(channels: usize, rp: &RatePoint) -> Result<()> {
    if channels != rp.channels() {
        return Err(Error::Shape(format!(
            "{channels} latent channels, gain vector has {}",
            rp.channels()
        )));
    }
    Ok(())
}

fn scale_channels(x: &FloatTensor, factors: &[f32]) -> FloatTensor {
    let plane = x.shape().plane();
    let mut out = x.clone();
    for (c, chunk) in out.data_mut().chunks_mut(plane.max(1)).enumerate() {
        for v in chunk {
            *v *= factors[c];
        }
    }
    out
}

/// Encoder-side gain: `y_c * gain_c`.
pub fn apply_gain(y: &FloatTensor, rp: &RatePoint) -> Result<FloatTensor> {
    check_channels(y.shape().channels, rp)?;
    Ok(scale_channels(y, &rp.gain))
}

/// Floating-point inverse gain, used when `g_s` is not quantized.
pub fn apply_inverse_gain_float(y_hat: &FloatTensor, rp: &RatePoint) -> Result<FloatTensor> {
    check_channels(y_hat.shape().channels, rp)?;
    Ok(scale_channels(y_hat, &rp.inverse_gain))
}

/// Fixed-point inverse gain: `requantize(v * ig_c)` from `2^-(g + a_in)` to `out`.
///
/// With `|v| <= 2^15 - 1` and `|ig_c| <= 2^15 - 1` the product is below
/// `2^30`, so the 32-bit multiply cannot overflow.
pub fn apply_inverse_gain(y_hat: &QTensor, rp: &RatePoint, out: ActSpec) -> Result<QTensor> {
    let shape = y_hat.shape();
    check_channels(shape.channels, rp)?;
    let plane = shape.plane();
    let data = y_hat
        .data()
        .chunks(plane.max(1))
        .zip(&rp.inverse_gain_q)
        .flat_map(|(chunk, &ig)| chunk.iter().map(move |&v| v * ig))
        .collect();
    let exp = rp.inverse_gain_exp + y_hat.spec().scale_exp();
    let acc = AccTensor::new(shape, data, vec![exp; shape.channels])?;
    requantize(&acc, out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn spec(a: u32, q: i32) -> ActSpec {
        ActSpec::new(a, q).unwrap()
    }

    #[test]
    fn identity_and_halving() {
        let s = spec(4, 32767);
        let x = QTensor::new(Shape::new(2, 1, 3), vec![5, -5, 32767, 1, -1, -32767], s).unwrap();
        let id = RatePoint::identity(2);
        assert_eq!(apply_inverse_gain(&x, &id, s).unwrap(), x);

        let half = RatePoint::new(vec![2.0; 2], vec![0.5; 2], false).unwrap();
        assert_eq!(half.inverse_gain_q, vec![1 << (half.inverse_gain_exp - 1); 2]);
        let y = apply_inverse_gain(&x, &half, s).unwrap();
        // round half up: 2.5 -> 3, -2.5 -> -2, 0.5 -> 1, -0.5 -> 0
        assert_eq!(y.data(), &[3, -2, 16384, 1, 0, -16383]);
    }

    #[test]
    fn product_bound() {
        let worst = 32767i64 * 32767;
        assert_eq!(worst, 1_073_676_289);
        assert!(worst < i32::MAX as i64);
        let s = spec(0, 32767);
        let x = QTensor::new(Shape::new(1, 1, 2), vec![32767, -32767], s).unwrap();
        let mut rp = RatePoint::identity(1);
        rp.inverse_gain_q = vec![32767];
        rp.inverse_gain_exp = 15;
        let y = apply_inverse_gain(&x, &rp, s).unwrap();
        assert_eq!(y.data(), &[32766, -32766]);
    }

    #[test]
    fn negative_shift_is_refused() {
        let x = QTensor::zeros(Shape::new(1, 1, 1), spec(0, 100));
        let mut rp = RatePoint::identity(1);
        rp.inverse_gain_exp = 0;
        rp.inverse_gain_q = vec![1];
        assert!(matches!(
            apply_inverse_gain(&x, &rp, spec(1, 100)),
            Err(Error::NegativeShift { .. })
        ));
    }

    #[test]
    fn float_gain_round_trip() {
        let rp = RatePoint::new(vec![2.0, 8.0], vec![0.5, 0.125], false).unwrap();
        let y = FloatTensor::new(Shape::new(2, 1, 2), vec![1.0, -3.0, 0.25, 2.0]).unwrap();
        let g = apply_gain(&y, &rp).unwrap();
        assert_eq!(g.data(), &[2.0, -6.0, 2.0, 16.0]);
        assert_eq!(apply_inverse_gain_float(&g, &rp).unwrap(), y);
    }
}
