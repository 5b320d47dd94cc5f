use serde::{Deserialize, Serialize};

use super::conv::convolve;
use super::{AccTensor, ActSpec, Backend, ConvGeometry, FloatTensor, QTensor};
use crate::error::{Error, Result};

/// Largest magnitude a signed 32-bit accumulator may hold.
pub const ACC_MAX: i64 = i32::MAX as i64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type", content = "shift")]
pub enum Activation {
    None,
    /// LeakyReLU with negative slope `2^-shift`.
    LeakyShift(u32),
}

/// A convolution with per-output-channel power-of-two weight scales.
///
/// Integer weight `w` of output channel `j` stands for `w * 2^-k[j]`; the
/// bias of that channel is stored at the accumulator scale `2^-(k[j] + a_in)`.
/// Construction enforces the overflow certificate
/// `sum_i |w[j,i]| * Q_in + |bias[j]| <= 2^31 - 1`, so no input admissible
/// under `in_spec` can overflow the accumulator in any summation order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QConvLayer {
    geometry: ConvGeometry,
    weight_bits: u32,
    weights: Vec<i32>,
    exponents: Vec<u32>,
    bias: Vec<i32>,
    in_spec: ActSpec,
    out_spec: ActSpec,
    activation: Activation,
}

impl QConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        geometry: ConvGeometry,
        weight_bits: u32,
        weights: Vec<i32>,
        exponents: Vec<u32>,
        bias: Vec<i32>,
        in_spec: ActSpec,
        out_spec: ActSpec,
        activation: Activation,
    ) -> Result<Self> {
        geometry.validate()?;
        in_spec.validate()?;
        out_spec.validate()?;
        if weight_bits != 8 && weight_bits != 16 {
            return Err(Error::InvalidSpec(format!(
                "weight width {weight_bits} (must be 8 or 16)"
            )));
        }
        if weights.len() != geometry.weight_len()
            || exponents.len() != geometry.out_channels
            || bias.len() != geometry.out_channels
        {
            return Err(Error::Shape(format!(
                "{} weights, {} exponents, {} biases for {geometry:?}",
                weights.len(),
                exponents.len(),
                bias.len()
            )));
        }
        if let Activation::LeakyShift(s) = activation {
            check_leaky_shift(s)?;
        }
        let layer = QConvLayer {
            geometry,
            weight_bits,
            weights,
            exponents,
            bias,
            in_spec,
            out_spec,
            activation,
        };
        let wmax = (1i32 << (weight_bits - 1)) - 1;
        let wmin = -(1i32 << (weight_bits - 1));
        if let Some(w) = layer.weights.iter().find(|&&w| w > wmax || w < wmin) {
            return Err(Error::InvalidSpec(format!(
                "weight {w} does not fit in {weight_bits} bits"
            )));
        }
        for j in 0..geometry.out_channels {
            let worst = layer.worst_case(j);
            if worst > ACC_MAX as i128 {
                return Err(Error::Certificate {
                    channel: j,
                    worst_case: worst,
                });
            }
            layer.shift(j)?;
        }
        Ok(layer)
    }

    pub fn geometry(&self) -> &ConvGeometry {
        &self.geometry
    }

    pub fn weight_bits(&self) -> u32 {
        self.weight_bits
    }

    pub fn weights(&self) -> &[i32] {
        &self.weights
    }

    pub fn row(&self, channel: usize) -> &[i32] {
        let n = self.geometry.fan_in();
        &self.weights[channel * n..(channel + 1) * n]
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn bias(&self) -> &[i32] {
        &self.bias
    }

    pub fn in_spec(&self) -> ActSpec {
        self.in_spec
    }

    pub fn out_spec(&self) -> ActSpec {
        self.out_spec
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// Exact worst-case accumulator magnitude of channel `j` over every input
    /// with `|x| <= Q_in`: the sum is maximised by `x_i = sign(w_i) * Q_in`.
    pub fn worst_case(&self, j: usize) -> i128 {
        let q = self.in_spec.clip() as i128;
        let taps: i128 = self.row(j).iter().map(|&w| (w as i128).abs()).sum();
        taps * q + (self.bias[j] as i128).abs()
    }

    /// Right shift that takes channel `j` from accumulator scale to `out_spec`.
    pub fn shift(&self, j: usize) -> Result<u32> {
        let s = self.exponents[j] as i32 + self.in_spec.scale_exp() as i32
            - self.out_spec.scale_exp() as i32;
        u32::try_from(s).map_err(|_| Error::NegativeShift {
            channel: j,
            shift: s,
        })
    }

    /// Convolution, requantization to `out_spec`, then the activation.
    pub fn forward(&self, input: &QTensor, backend: Backend) -> Result<QTensor> {
        let acc = conv2d_int(input, self, backend)?;
        let out = requantize(&acc, self.out_spec)?;
        Ok(match self.activation {
            Activation::None => out,
            Activation::LeakyShift(s) => leaky_relu_shift(&out, s)?,
        })
    }
}

/// Exact integer convolution into a 32-bit accumulator.
pub fn conv2d_int(input: &QTensor, layer: &QConvLayer, backend: Backend) -> Result<AccTensor> {
    if input.spec() != layer.in_spec {
        return Err(Error::SpecMismatch {
            expected: layer.in_spec.to_string(),
            actual: input.spec().to_string(),
        });
    }
    let (shape, data) = convolve(
        &layer.geometry,
        input.shape(),
        input.data(),
        &layer.weights,
        &layer.bias,
        backend,
    )?;
    let a_in = layer.in_spec.scale_exp();
    let scale_exps = layer.exponents.iter().map(|k| k + a_in).collect();
    AccTensor::new(shape, data, scale_exps)
}

/// `(v + 2^(s-1)) >> s` with an arithmetic shift; identity for `s == 0`.
pub fn round_half_up_shift(v: i32, s: u32) -> i32 {
    match s {
        0 => v,
        // 64-bit intermediate: v + 2^(s-1) can leave the i32 range near the top.
        s if s < 63 => ((v as i64 + (1i64 << (s - 1))) >> s) as i32,
        _ => 0,
    }
}

/// Rescales accumulator sums to `out`, rounding half up and clipping to `[-Q, Q]`.
pub fn requantize(acc: &AccTensor, out: ActSpec) -> Result<QTensor> {
    let shape = acc.shape();
    let plane = shape.plane();
    let q = out.clip();
    let mut data = Vec::with_capacity(shape.len());
    for (c, &exp) in acc.scale_exps().iter().enumerate() {
        let s = exp as i32 - out.scale_exp() as i32;
        let s = u32::try_from(s).map_err(|_| Error::NegativeShift {
            channel: c,
            shift: s,
        })?;
        data.extend(
            acc.data()[c * plane..(c + 1) * plane]
                .iter()
                .map(|&v| round_half_up_shift(v, s).clamp(-q, q)),
        );
    }
    Ok(QTensor::from_parts_unchecked(shape, data, out))
}

fn check_leaky_shift(s: u32) -> Result<()> {
    if (1..=15).contains(&s) {
        Ok(())
    } else {
        Err(Error::InvalidSpec(format!("leaky shift {s} outside [1, 15]")))
    }
}

/// LeakyReLU with slope `2^-s` on the negative side, by arithmetic shift.
pub fn leaky_relu_shift(x: &QTensor, s: u32) -> Result<QTensor> {
    check_leaky_shift(s)?;
    let data = x
        .data()
        .iter()
        .map(|&v| if v >= 0 { v } else { v >> s })
        .collect();
    Ok(QTensor::from_parts_unchecked(x.shape(), data, x.spec()))
}

/// Saturating elementwise sum of two tensors in the same format.
pub fn add_int(a: &QTensor, b: &QTensor) -> Result<QTensor> {
    if a.spec() != b.spec() {
        return Err(Error::SpecMismatch {
            expected: a.spec().to_string(),
            actual: b.spec().to_string(),
        });
    }
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!("add {} + {}", a.shape(), b.shape())));
    }
    let q = a.spec().clip();
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x + y).clamp(-q, q))
        .collect();
    Ok(QTensor::from_parts_unchecked(a.shape(), data, a.spec()))
}

/// `clip(round_half_away(x * 2^a), -Q, Q)`.
pub fn quantize_tensor(x: &FloatTensor, spec: ActSpec) -> QTensor {
    let scale = f64::from(1u32 << spec.scale_exp());
    let q = spec.clip() as f64;
    let data = x
        .data()
        .iter()
        .map(|&v| {
            // NaN maps to 0 through the saturating cast.
            (v as f64 * scale).round().clamp(-q, q) as i32
        })
        .collect();
    QTensor::from_parts_unchecked(x.shape(), data, spec)
}

/// Exact: every `|q| <= 2^15` divided by a power of two is an f32.
pub fn dequantize_tensor(x: &QTensor) -> FloatTensor {
    let scale = 1.0 / (1u32 << x.spec().scale_exp()) as f32;
    let data = x.data().iter().map(|&v| v as f32 * scale).collect();
    FloatTensor::new(x.shape(), data).expect("shape preserved")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{ConvGeometry, Shape};
    use proptest::prelude::*;

    fn spec(a: u32, q: i32) -> ActSpec {
        ActSpec::new(a, q).unwrap()
    }

    fn one_by_one(weights: Vec<i32>, bias: i32, in_spec: ActSpec) -> QConvLayer {
        let n = weights.len();
        QConvLayer::new(
            ConvGeometry::conv(n, 1, 1, 1, 0),
            16,
            weights,
            vec![0],
            vec![bias],
            in_spec,
            spec(0, 32767),
            Activation::None,
        )
        .unwrap()
    }

    #[test]
    fn conv_dot_product() {
        let s = spec(0, 32767);
        let layer = one_by_one(vec![2, 3], 1, s);
        let x = QTensor::new(Shape::new(2, 1, 1), vec![4, 5], s).unwrap();
        let acc = conv2d_int(&x, &layer, Backend::Reference).unwrap();
        assert_eq!(acc.data(), &[24]);
        assert_eq!(acc.scale_exps(), &[0]);
    }

    #[test]
    fn zero_input_gives_bias() {
        let s = spec(3, 1000);
        let layer = QConvLayer::new(
            ConvGeometry::conv(2, 3, 3, 1, 1),
            8,
            (0..54).map(|i| i % 7 - 3).collect(),
            vec![2, 4, 5],
            vec![-7, 0, 11],
            s,
            spec(0, 32767),
            Activation::None,
        )
        .unwrap();
        let x = QTensor::zeros(Shape::new(2, 4, 4), s);
        for backend in Backend::ALL {
            let acc = conv2d_int(&x, &layer, backend).unwrap();
            for c in 0..3 {
                assert!(acc.data()[c * 16..(c + 1) * 16].iter().all(|&v| v == layer.bias()[c]));
            }
            assert_eq!(acc.scale_exps(), &[5, 7, 8]);
        }
    }

    #[test]
    fn adversarial_input_hits_exact_worst_case() {
        // w = [0.5, -0.25] at k = 15 -> [16384, -8192]
        let q = spec(0, 32767);
        let layer = one_by_one(vec![16384, -8192], 0, q);
        let x = QTensor::new(Shape::new(2, 1, 1), vec![32767, -32767], q).unwrap();
        let acc = conv2d_int(&x, &layer, Backend::Permuted).unwrap();
        let oracle: i128 = 16384i128 * 32767 + 8192i128 * 32767;
        assert_eq!(oracle, 805_281_792);
        assert_eq!(acc.data()[0] as i128, oracle);
        assert_eq!(layer.worst_case(0), oracle);
    }

    #[test]
    fn certificate_violation_refused() {
        let q = spec(0, 32767);
        let err = QConvLayer::new(
            ConvGeometry::conv(2, 1, 1, 1, 0),
            16,
            // 2 * 32767^2 = 2147352578 still fits; the bias tips it over
            vec![32767, 32767],
            vec![0],
            vec![131070],
            q,
            q,
            Activation::None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Certificate { channel: 0, .. }));
    }

    #[test]
    fn mismatched_spec_is_rejected() {
        let layer = one_by_one(vec![1], 0, spec(2, 100));
        let x = QTensor::zeros(Shape::new(1, 1, 1), spec(3, 100));
        assert!(matches!(
            conv2d_int(&x, &layer, Backend::Reference),
            Err(Error::SpecMismatch { .. })
        ));
        let x = QTensor::zeros(Shape::new(2, 1, 1), spec(2, 100));
        assert!(matches!(conv2d_int(&x, &layer, Backend::Reference), Err(Error::Shape(_))));
    }

    #[test]
    fn requantize_rounding_and_clip() {
        let out = spec(0, 32767);
        let acc = AccTensor::new(Shape::new(1, 1, 3), vec![5, -5, 70000], vec![1]).unwrap();
        assert_eq!(requantize(&acc, out).unwrap().data(), &[3, -2, 32767]);
        let acc = AccTensor::new(Shape::new(1, 1, 1), vec![9], vec![0]).unwrap();
        assert!(matches!(
            requantize(&acc, spec(1, 10)),
            Err(Error::NegativeShift { channel: 0, shift: -1 })
        ));
    }

    #[test]
    fn round_half_up_near_limits() {
        assert_eq!(round_half_up_shift(i32::MAX, 1), 1 << 30);
        assert_eq!(round_half_up_shift(i32::MIN + 1, 4), -(1 << 27));
        assert_eq!(round_half_up_shift(7, 0), 7);
    }

    #[test]
    fn leaky_shift_examples() {
        let s = spec(0, 100);
        let x = QTensor::new(Shape::new(1, 1, 3), vec![16, -16, -15], s).unwrap();
        assert_eq!(leaky_relu_shift(&x, 3).unwrap().data(), &[16, -2, -2]);
        assert!(leaky_relu_shift(&x, 0).is_err());
        assert!(leaky_relu_shift(&x, 16).is_err());
    }

    #[test]
    fn add_examples() {
        let s = spec(0, 32767);
        let a = QTensor::new(Shape::new(1, 1, 2), vec![1, 2], s).unwrap();
        let b = QTensor::new(Shape::new(1, 1, 2), vec![3, 4], s).unwrap();
        assert_eq!(add_int(&a, &b).unwrap().data(), &[4, 6]);
        let big = QTensor::new(Shape::new(1, 1, 2), vec![30000, -30000], s).unwrap();
        assert_eq!(add_int(&big, &big).unwrap().data(), &[32767, -32767]);
        let zero = QTensor::zeros(Shape::new(1, 1, 2), s);
        assert_eq!(add_int(&a, &zero).unwrap(), a);
        let other = QTensor::zeros(Shape::new(1, 1, 2), spec(1, 32767));
        assert!(add_int(&a, &other).is_err());
    }

    #[test]
    fn quantize_dequantize_examples() {
        let x = FloatTensor::new(Shape::new(1, 1, 4), vec![0.5, -0.5, 1000.0, 0.0]).unwrap();
        let q = quantize_tensor(&x, spec(8, 32767));
        assert_eq!(q.data(), &[128, -128, 32767, 0]);
        let back = dequantize_tensor(&q);
        assert_eq!(back.data()[0], 0.5);
        assert_eq!(back.data()[1], -0.5);
        assert_eq!(back.data()[3], 0.0);
    }

    proptest! {
        #[test]
        fn requantize_is_monotone(v1 in any::<i32>(), v2 in any::<i32>(), s in 0u32..20, q in 1i32..=32767) {
            let (lo, hi) = if v1 <= v2 { (v1, v2) } else { (v2, v1) };
            let out = spec(0, q);
            let acc = AccTensor::new(Shape::new(1, 1, 2), vec![lo, hi], vec![s]).unwrap();
            let r = requantize(&acc, out).unwrap();
            prop_assert!(r.data()[0] <= r.data()[1]);
        }

        #[test]
        fn leaky_shift_contracts(v in -32767i32..=32767, s in 1u32..=15) {
            let x = QTensor::new(Shape::new(1, 1, 1), vec![v], spec(0, 32767)).unwrap();
            let y = leaky_relu_shift(&x, s).unwrap().data()[0];
            if v >= 0 { prop_assert_eq!(y, v); }
            prop_assert!(y.abs() <= v.abs());
        }

        #[test]
        fn quantize_error_bound(x in -200.0f32..200.0, a in 0u32..=15) {
            let s = spec(a, 32767);
            prop_assume!((x as f64).abs() * f64::from(1u32 << a) <= 32767.0);
            let t = FloatTensor::new(Shape::new(1, 1, 1), vec![x]).unwrap();
            let back = dequantize_tensor(&quantize_tensor(&t, s)).data()[0];
            prop_assert!(((back as f64) - (x as f64)).abs() <= 2f64.powi(-(a as i32) - 1));
        }
    }
}
