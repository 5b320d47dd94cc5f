//! Per-channel weight quantization under the 32-bit accumulator bound.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ActSpec, Activation, FloatConv, QConvLayer, ACC_MAX};

/// Upper end of the exponent scan.
pub const K_CAP: u32 = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WeightBits {
    #[serde(rename = "int8")]
    Int8,
    #[serde(rename = "int16")]
    Int16,
}

impl WeightBits {
    pub fn bits(self) -> u32 {
        match self {
            WeightBits::Int8 => 8,
            WeightBits::Int16 => 16,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            WeightBits::Int8 => "int8",
            WeightBits::Int16 => "int16",
        }
    }

    fn range(self) -> (i64, i64) {
        let half = 1i64 << (self.bits() - 1);
        (-half, half - 1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelQuantResult {
    pub k: u32,
    pub q_weights: Vec<i32>,
    pub q_bias: i32,
    /// Squared weight error `sum (w - q * 2^-k)^2`.
    pub clip_error: f64,
}

fn round_scaled(v: f32, exp: u32) -> Option<i128> {
    // exact: an f32 times a power of two is an f64
    let scaled = (v as f64 * 2f64.powi(exp as i32)).round();
    // Anything this large fails the accumulator bound anyway.
    (scaled.is_finite() && scaled.abs() < 2f64.powi(100)).then_some(scaled as i128)
}

fn fits_accumulator(w_row: &[f32], bias: f32, in_spec: ActSpec, k: u32, representable: Option<i64>) -> bool {
    let q = in_spec.clip() as i128;
    let mut sum: i128 = 0;
    for &w in w_row {
        let Some(v) = round_scaled(w, k) else {
            return false;
        };
        if let Some(limit) = representable {
            if v.abs() > limit as i128 {
                return false;
            }
        }
        sum += v.abs();
    }
    let Some(b) = round_scaled(bias, k + in_spec.scale_exp()) else {
        return false;
    };
    sum * q + b.abs() <= ACC_MAX as i128
}

/// Largest `k <= K_CAP` whose rounded weights and bias satisfy
/// `sum |round(w * 2^k)| * Q + |round(b * 2^(k+a))| <= 2^31 - 1`.
///
/// For 16-bit weights every `round(w * 2^k)` must also fit in 16 bits. For
/// 8-bit weights only the accumulator bound applies; clipping is left to the
/// search. Both conditions are monotone in `k`, so the feasible set is a
/// prefix of `0..=K_CAP`.
pub fn max_safe_exponent(w_row: &[f32], bias: f32, in_spec: ActSpec, bits: WeightBits) -> Result<u32> {
    if w_row.is_empty() {
        return Err(Error::QuantConfig("empty weight row".into()));
    }
    let representable = match bits {
        WeightBits::Int16 => Some(bits.range().1),
        WeightBits::Int8 => None,
    };
    let mut best = None;
    for k in 0..=K_CAP {
        if fits_accumulator(w_row, bias, in_spec, k, representable) {
            best = Some(k);
        } else {
            break;
        }
    }
    best.ok_or_else(|| Error::Infeasible {
        layer: String::new(),
        channel: 0,
    })
}

fn quantize_bias(bias: f32, k: u32, in_spec: ActSpec) -> i32 {
    let v = round_scaled(bias, k + in_spec.scale_exp()).expect("bias checked by the exponent bound");
    i32::try_from(v).expect("bias bounded by the certificate")
}

fn squared_error(w_row: &[f32], q: &[i32], k: u32) -> f64 {
    let step = 2f64.powi(-(k as i32));
    w_row
        .iter()
        .zip(q)
        .map(|(&w, &q)| {
            let d = w as f64 - q as f64 * step;
            d * d
        })
        .sum()
}

fn weights_at(w_row: &[f32], k: u32, bits: WeightBits) -> Vec<i32> {
    let (lo, hi) = bits.range();
    w_row
        .iter()
        .map(|&w| round_scaled(w, k).map_or(0, |v| v.clamp(lo as i128, hi as i128) as i32))
        .collect()
}

/// 16-bit weights: scale by the largest safe exponent directly.
pub fn quantize_channel_16(w_row: &[f32], bias: f32, in_spec: ActSpec) -> Result<ChannelQuantResult> {
    let k = max_safe_exponent(w_row, bias, in_spec, WeightBits::Int16)?;
    let q_weights = weights_at(w_row, k, WeightBits::Int16);
    Ok(ChannelQuantResult {
        k,
        clip_error: squared_error(w_row, &q_weights, k),
        q_bias: quantize_bias(bias, k, in_spec),
        q_weights,
    })
}

/// 8-bit weights: the safe exponent is only an upper bound; pick the
/// exponent in `[0, k_max]` with the least squared error after clipping to
/// `[-128, 127]`, preferring the larger exponent on ties.
pub fn quantize_channel_8_search(w_row: &[f32], bias: f32, in_spec: ActSpec) -> Result<ChannelQuantResult> {
    let k_max = max_safe_exponent(w_row, bias, in_spec, WeightBits::Int8)?;
    let mut best: Option<(u32, Vec<i32>, f64)> = None;
    for k in 0..=k_max {
        let q = weights_at(w_row, k, WeightBits::Int8);
        let err = squared_error(w_row, &q, k);
        if best.as_ref().is_none_or(|(_, _, e)| err <= *e) {
            best = Some((k, q, err));
        }
    }
    let (k, q_weights, clip_error) = best.expect("k = 0 is always scanned");
    Ok(ChannelQuantResult {
        k,
        q_bias: quantize_bias(bias, k, in_spec),
        q_weights,
        clip_error,
    })
}

pub fn quantize_channel(
    w_row: &[f32],
    bias: f32,
    in_spec: ActSpec,
    bits: WeightBits,
) -> Result<ChannelQuantResult> {
    match bits {
        WeightBits::Int16 => quantize_channel_16(w_row, bias, in_spec),
        WeightBits::Int8 => quantize_channel_8_search(w_row, bias, in_spec),
    }
}

/// Largest output scale exponent the layer supports at `in_spec`:
/// `min_j k_j + a_in`. Output formats finer than this would need a left shift.
pub fn max_output_scale(layer: &FloatConv, bits: WeightBits, in_spec: ActSpec) -> Result<u32> {
    let channels = quantize_rows(layer, bits, in_spec, "")?;
    Ok(channels.iter().map(|c| c.k).min().unwrap_or(0) + in_spec.scale_exp())
}

fn quantize_rows(layer: &FloatConv, bits: WeightBits, in_spec: ActSpec, name: &str) -> Result<Vec<ChannelQuantResult>> {
    (0..layer.geometry.out_channels)
        .into_par_iter()
        .map(|j| {
            quantize_channel(layer.row(j), layer.bias[j], in_spec, bits).map_err(|e| match e {
                Error::Infeasible { .. } => Error::Infeasible {
                    layer: name.to_string(),
                    channel: j,
                },
                other => other,
            })
        })
        .collect()
}

/// Quantizes every output channel of `layer` and assembles the integer layer.
///
/// Fails with [`Error::NegativeShift`] when `out_spec` is finer than some
/// channel's accumulator scale `k_j + a_in`; callers choose a coarser output
/// format in that case.
pub fn quantize_layer(
    layer: &FloatConv,
    bits: WeightBits,
    in_spec: ActSpec,
    out_spec: ActSpec,
    activation: Activation,
    name: &str,
) -> Result<QConvLayer> {
    let channels = quantize_rows(layer, bits, in_spec, name)?;
    let mut weights = Vec::with_capacity(layer.geometry.weight_len());
    let mut exponents = Vec::with_capacity(channels.len());
    let mut bias = Vec::with_capacity(channels.len());
    for c in channels {
        weights.extend_from_slice(&c.q_weights);
        exponents.push(c.k);
        bias.push(c.q_bias);
    }
    QConvLayer::new(
        layer.geometry,
        bits.bits(),
        weights,
        exponents,
        bias,
        in_spec,
        out_spec,
        activation,
    )
}
