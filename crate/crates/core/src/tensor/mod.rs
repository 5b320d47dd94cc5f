//! Tensor arithmetic for the codec.
//!
//! Two families live here. Float tensors serve the encoder and the float
//! anchor; their convolutions can be evaluated in several accumulation
//! orders, which is how device-to-device divergence is reproduced on a
//! single machine. Integer tensors serve the quantized decoder; every integer
//! operation is exact, so all accumulation orders agree bit for bit as long
//! as the layer's overflow certificate holds.

mod conv;
mod float;
mod int;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use conv::{ConvGeometry, ConvKind};
pub use float::{add_float, conv2d_float, leaky_relu_float, FloatConv};
pub use int::{
    add_int, conv2d_int, dequantize_tensor, leaky_relu_shift, quantize_tensor, requantize,
    round_half_up_shift, Activation, QConvLayer, ACC_MAX,
};

/// (channels, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Shape {
            channels,
            height,
            width,
        }
    }

    pub const fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn plane(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

/// Evaluation order used by convolutions.
///
/// Integer convolutions produce identical results under every order. Float
/// convolutions generally do not, which is the point: each variant stands in
/// for a different device.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Bias first, then input channels and taps in ascending order.
    #[default]
    Reference,
    /// Input channels summed in tiles of four; tile partial sums are added
    /// together and the bias comes last.
    Tiled,
    /// Input channels and taps in descending order, bias last.
    Permuted,
}

impl Backend {
    pub const ALL: [Backend; 3] = [Backend::Reference, Backend::Tiled, Backend::Permuted];

    pub fn name(self) -> &'static str {
        match self {
            Backend::Reference => "reference",
            Backend::Tiled => "tiled",
            Backend::Permuted => "permuted",
        }
    }
}

impl fmt::Display for Backend {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Backend {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "reference" => Ok(Backend::Reference),
            "tiled" => Ok(Backend::Tiled),
            "permuted" => Ok(Backend::Permuted),
            other => Err(Error::InvalidSpec(format!("unknown backend '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FloatTensor {
    shape: Shape,
    data: Vec<f32>,
}

impl FloatTensor {
    pub fn new(shape: Shape, data: Vec<f32>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} elements for shape {shape}",
                data.len()
            )));
        }
        Ok(FloatTensor { shape, data })
    }

    pub fn zeros(shape: Shape) -> Self {
        FloatTensor {
            shape,
            data: vec![0.0; shape.len()],
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f32] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> FloatTensor {
        FloatTensor {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

/// Fixed-point format of an activation tensor: integer `q` stands for
/// `q * 2^-scale_exp`, and every value is clipped to `[-clip, clip]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActSpec {
    #[serde(rename = "a")]
    scale_exp: u32,
    #[serde(rename = "q")]
    clip: i32,
}

impl ActSpec {
    pub const MAX_SCALE_EXP: u32 = 15;
    pub const MAX_CLIP: i32 = (1 << 15) - 1;

    pub fn new(scale_exp: u32, clip: i32) -> Result<Self> {
        if scale_exp > Self::MAX_SCALE_EXP {
            return Err(Error::InvalidSpec(format!(
                "scale exponent {scale_exp} exceeds {}",
                Self::MAX_SCALE_EXP
            )));
        }
        if !(1..=Self::MAX_CLIP).contains(&clip) {
            return Err(Error::InvalidSpec(format!(
                "clip bound {clip} outside [1, {}]",
                Self::MAX_CLIP
            )));
        }
        Ok(ActSpec { scale_exp, clip })
    }

    /// Compile-time constructor; panics on an invalid spec.
    pub const fn const_new(scale_exp: u32, clip: i32) -> Self {
        assert!(scale_exp <= Self::MAX_SCALE_EXP && clip >= 1 && clip <= Self::MAX_CLIP);
        ActSpec { scale_exp, clip }
    }

    pub fn scale_exp(&self) -> u32 {
        self.scale_exp
    }

    pub fn clip(&self) -> i32 {
        self.clip
    }

    /// Largest representable magnitude in real units.
    pub fn max_real(&self) -> f64 {
        self.clip as f64 / f64::from(1u32 << self.scale_exp)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        ActSpec::new(self.scale_exp, self.clip).map(|_| ())
    }
}

impl fmt::Display for ActSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(a={}, Q={})", self.scale_exp, self.clip)
    }
}

/// Integer activations in a common fixed-point format.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct QTensor {
    shape: Shape,
    data: Vec<i32>,
    spec: ActSpec,
}

impl QTensor {
    /// Fails if any value lies outside `[-Q, Q]`.
    pub fn new(shape: Shape, data: Vec<i32>, spec: ActSpec) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(Error::Shape(format!(
                "{} elements for shape {shape}",
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| v.abs() > spec.clip()) {
            return Err(Error::InvalidSpec(format!(
                "value {v} outside clip range of {spec}"
            )));
        }
        Ok(QTensor { shape, data, spec })
    }

    pub(crate) fn from_parts_unchecked(shape: Shape, data: Vec<i32>, spec: ActSpec) -> Self {
        debug_assert_eq!(data.len(), shape.len());
        QTensor { shape, data, spec }
    }

    pub fn zeros(shape: Shape, spec: ActSpec) -> Self {
        QTensor {
            shape,
            data: vec![0; shape.len()],
            spec,
        }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn spec(&self) -> ActSpec {
        self.spec
    }

    pub fn channel(&self, c: usize) -> &[i32] {
        let p = self.shape.plane();
        &self.data[c * p..(c + 1) * p]
    }
}

/// Raw convolution sums before requantization. Each output channel carries its
/// own exponent because weight exponents are chosen per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccTensor {
    shape: Shape,
    data: Vec<i32>,
    scale_exps: Vec<u32>,
}

impl AccTensor {
    pub fn new(shape: Shape, data: Vec<i32>, scale_exps: Vec<u32>) -> Result<Self> {
        if data.len() != shape.len() || scale_exps.len() != shape.channels {
            return Err(Error::Shape(format!(
                "{} elements / {} exponents for shape {shape}",
                data.len(),
                scale_exps.len()
            )));
        }
        Ok(AccTensor {
            shape,
            data,
            scale_exps,
        })
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn scale_exps(&self) -> &[u32] {
        &self.scale_exps
    }
}
