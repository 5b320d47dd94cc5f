use super::conv::convolve;
use super::{Backend, ConvGeometry, FloatTensor};
use crate::error::{Error, Result};

/// A float convolution layer; the encoder and the unquantized anchor use these.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatConv {
    pub geometry: ConvGeometry,
    /// `(out, in, kh, kw)` row-major.
    pub weights: Vec<f32>,
    pub bias: Vec<f32>,
}

impl FloatConv {
    pub fn new(geometry: ConvGeometry, weights: Vec<f32>, bias: Vec<f32>) -> Result<Self> {
        geometry.validate()?;
        if weights.len() != geometry.weight_len() || bias.len() != geometry.out_channels {
            return Err(Error::Shape(format!(
                "{} weights / {} biases for {geometry:?}",
                weights.len(),
                bias.len()
            )));
        }
        Ok(FloatConv {
            geometry,
            weights,
            bias,
        })
    }

    pub fn row(&self, channel: usize) -> &[f32] {
        let n = self.geometry.fan_in();
        &self.weights[channel * n..(channel + 1) * n]
    }

    pub fn forward(&self, input: &FloatTensor, backend: Backend) -> Result<FloatTensor> {
        conv2d_float(input, &self.geometry, &self.weights, &self.bias, backend)
    }
}

/// f32 cross-correlation (or its transpose). `Backend::Reference` is the
/// sequential order used wherever a reproducible float result is required.
pub fn conv2d_float(
    input: &FloatTensor,
    geometry: &ConvGeometry,
    weights: &[f32],
    bias: &[f32],
    backend: Backend,
) -> Result<FloatTensor> {
    let (shape, data) = convolve(geometry, input.shape(), input.data(), weights, bias, backend)?;
    FloatTensor::new(shape, data)
}

/// LeakyReLU with negative slope `2^-shift`, the float twin of the bit-shift version.
pub fn leaky_relu_float(x: &FloatTensor, shift: u32) -> FloatTensor {
    let slope = 1.0 / (1u32 << shift) as f32;
    x.map(|v| if v >= 0.0 { v } else { v * slope })
}

pub fn add_float(a: &FloatTensor, b: &FloatTensor) -> Result<FloatTensor> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("add {} + {}", a.shape(), b.shape())));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    FloatTensor::new(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;
    use num::rational::BigRational;
    use num::{FromPrimitive, ToPrimitive};

    #[test]
    fn one_by_one() {
        let x = FloatTensor::new(Shape::new(1, 1, 1), vec![3.0]).unwrap();
        let g = ConvGeometry::conv(1, 1, 1, 1, 0);
        let y = conv2d_float(&x, &g, &[2.0], &[1.0], Backend::Reference).unwrap();
        assert_eq!(y.data(), &[7.0]);
        let y = conv2d_float(&x, &g, &[0.0], &[1.0], Backend::Permuted).unwrap();
        assert_eq!(y.data(), &[1.0]);
    }

    /// Summands of wildly different magnitude: the association decides which
    /// low bits survive.
    #[test]
    fn orders_diverge_on_staircase() {
        let big = 2f32.powi(24);
        let weights = [big, 1.0, 0.5, -big];
        let g = ConvGeometry::conv(4, 1, 1, 1, 0);
        let x = FloatTensor::new(Shape::new(4, 1, 1), vec![1.0; 4]).unwrap();
        let bias = [0.25f32];

        let mut exact = BigRational::from_f32(bias[0]).unwrap();
        for w in weights {
            exact += BigRational::from_f32(w).unwrap();
        }
        assert_eq!(exact.to_f64().unwrap(), 1.75);

        let reference = conv2d_float(&x, &g, &weights, &bias, Backend::Reference).unwrap().data()[0];
        let permuted = conv2d_float(&x, &g, &weights, &bias, Backend::Permuted).unwrap().data()[0];
        // (((0.25 + 2^24) + 1) + 0.5) - 2^24 loses everything below 2^24's ulp
        assert_eq!(reference, 0.0);
        // (((-2^24 + 0.5) + 1) + 2^24) + 0.25: the 0.5 is lost to ties-to-even, the 1 survives
        assert_eq!(permuted, 1.25);
        assert_ne!(reference, permuted);
    }

    #[test]
    fn leaky_float_matches_shift_family() {
        let x = FloatTensor::new(Shape::new(1, 1, 2), vec![-16.0, 4.0]).unwrap();
        assert_eq!(leaky_relu_float(&x, 3).data(), &[-2.0, 4.0]);
    }
}
