//! Independent check of the no-overflow guarantee on quantized layers.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{QConvLayer, ACC_MAX};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ChannelWitness {
    pub channel: usize,
    /// Accumulator value reached by the adversarial input, in exact arithmetic.
    pub worst_case: i128,
    /// `2^31 - 1 - worst_case`; negative means overflow.
    pub headroom: i128,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct WitnessReport {
    pub channels: Vec<ChannelWitness>,
}

impl WitnessReport {
    pub fn min_headroom(&self) -> Option<i128> {
        self.channels.iter().map(|c| c.headroom).min()
    }

    pub fn violations(&self) -> impl Iterator<Item = &ChannelWitness> {
        self.channels.iter().filter(|c| c.headroom < 0)
    }
}

/// Builds `x_i = sign(b) * sign(w_i) * Q` for every row, evaluates the
/// accumulator with 128-bit integers and reports the per-channel headroom.
pub fn witness_rows<'a>(rows: impl IntoIterator<Item = (&'a [i32], i32)>, clip: i32) -> WitnessReport {
    let channels = rows
        .into_iter()
        .enumerate()
        .map(|(channel, (row, bias))| {
            let sign_b: i128 = if bias < 0 { -1 } else { 1 };
            let input = row.iter().map(|&w| sign_b * (w as i128).signum() * clip as i128);
            let acc: i128 = row
                .iter()
                .zip(input)
                .map(|(&w, x)| w as i128 * x)
                .sum::<i128>()
                + bias as i128;
            let worst_case = acc.abs();
            ChannelWitness {
                channel,
                worst_case,
                headroom: ACC_MAX as i128 - worst_case,
            }
        })
        .collect();
    WitnessReport { channels }
}

/// Fails on the first channel whose adversarial input overflows.
pub fn overflow_witness_check(layer: &QConvLayer) -> Result<WitnessReport> {
    let channels = layer.geometry().out_channels;
    let report = witness_rows(
        (0..channels).map(|j| (layer.row(j), layer.bias()[j])),
        layer.in_spec().clip(),
    );
    if let Some(bad) = report.violations().next() {
        return Err(Error::Certificate {
            channel: bad.channel,
            worst_case: bad.worst_case,
        });
    }
    Ok(report)
}
