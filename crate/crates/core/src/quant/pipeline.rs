//! The three-step decoder quantization: `h_sigma`, then `h_mu`, then `g_s`.

use serde::{Deserialize, Serialize};

use super::calibrate::{BdScores, CalibrationSet, Calibrator, LayerTarget, QuantConfig};
use super::channel::{quantize_layer, WeightBits};
use super::witness::overflow_witness_check;
use crate::codec::{format_precision, LayerParams, LayerRole, ModelGraph, SubnetKind, HYPER_SPEC, PIXEL_SPEC};
use crate::error::{Error, Result};
use crate::tensor::ActSpec;

/// How a layer's output format was fixed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpecSource {
    Searched,
    /// Residual second layer: writes the block input format.
    Tied,
    /// Pixel output of `g_s`.
    Fixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDecision {
    pub layer: String,
    pub weight_bits: Option<WeightBits>,
    pub in_spec: ActSpec,
    pub out_spec: ActSpec,
    pub source: SpecSource,
    /// Calibration objective of the chosen format, for searched formats.
    pub score: Option<f64>,
}

/// One row of the per-step BD-rate table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    pub precision: String,
    pub subnet: SubnetKind,
    pub scores: BdScores,
    pub decisions: Vec<LayerDecision>,
}

#[derive(Debug, Clone)]
pub struct PipelineStep {
    pub model: ModelGraph,
    pub report: StepReport,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub steps: Vec<PipelineStep>,
}

impl PipelineOutput {
    /// The model after the last step run.
    pub fn model(&self) -> &ModelGraph {
        &self.steps.last().expect("pipeline runs at least one step").model
    }

    pub fn reports(&self) -> Vec<&StepReport> {
        self.steps.iter().map(|s| &s.report).collect()
    }
}

/// Checks every integer layer of `model` against the worst-case input.
pub fn check_certificates(model: &ModelGraph) -> Result<()> {
    for b in &model.branches {
        for kind in SubnetKind::ALL {
            for l in b.subnet(kind).layers() {
                if let Some(q) = l.as_int() {
                    overflow_witness_check(q)?;
                }
            }
        }
    }
    Ok(())
}

/// Quantizes one subnet of one branch layer by layer. `in_spec` is what the
/// first layer reads.
fn quantize_subnet(
    cal: &Calibrator,
    model: &mut ModelGraph,
    branch: usize,
    kind: SubnetKind,
    in_spec: ActSpec,
    bits: WeightBits,
    grid: &[ActSpec],
) -> Result<Vec<LayerDecision>> {
    let count = model.branches[branch].subnet(kind).layer_count();
    let roles = model.branches[branch].subnet(kind).roles();
    let mut decisions = Vec::with_capacity(count);
    let mut cur_in = in_spec;
    for (idx, &role) in roles.iter().enumerate() {
        let net = model.branches[branch].subnet(kind);
        let (out_spec, source, score) = if kind == SubnetKind::GS && idx + 1 == count {
            (PIXEL_SPEC, SpecSource::Fixed, None)
        } else if role == LayerRole::ResidualSecond {
            let block_in = match net.residual_source(idx) {
                Some(src) => net.layer(src).out_spec().expect("earlier layers are integer"),
                None => in_spec,
            };
            (block_in, SpecSource::Tied, None)
        } else {
            let target = LayerTarget { branch, kind, layer: idx };
            let (spec, score) = cal.calibrate_layer(model, target, cur_in, bits, grid)?;
            (spec, SpecSource::Searched, Some(score))
        };
        let layer = net.layer(idx);
        let conv = layer
            .as_float()
            .ok_or_else(|| Error::QuantConfig(format!("layer {} is already quantized", layer.name)))?;
        let q = quantize_layer(conv, bits, cur_in, out_spec, layer.activation, &layer.name)?;
        decisions.push(LayerDecision {
            layer: layer.name.clone(),
            weight_bits: Some(bits),
            in_spec: cur_in,
            out_spec,
            source,
            score,
        });
        model.branches[branch].subnet_mut(kind).layer_mut(idx).params = LayerParams::Int(q);
        cur_in = out_spec;
    }
    Ok(decisions)
}

/// Quantizes `h_sigma` (8-bit), then `h_mu`, then `g_s`, each step starting
/// from the model the previous step produced. `g_a` and `h_a` stay float.
/// Returns the model and its BD-rates after every step.
pub fn quantize_decoder_pipeline(
    model: &ModelGraph,
    calib: CalibrationSet,
    config: &QuantConfig,
) -> Result<PipelineOutput> {
    let cal = Calibrator::new(model, calib)?;
    quantize_with(&cal, model, config)
}

/// [`quantize_decoder_pipeline`] with a prepared calibrator whose anchor is `model`.
pub fn quantize_with(cal: &Calibrator, model: &ModelGraph, config: &QuantConfig) -> Result<PipelineOutput> {
    quantize_until(cal, model, config, SubnetKind::GS)
}

/// Runs the steps up to and including `last`.
pub fn quantize_until(
    cal: &Calibrator,
    model: &ModelGraph,
    config: &QuantConfig,
    last: SubnetKind,
) -> Result<PipelineOutput> {
    let n_steps = SubnetKind::DECODER
        .iter()
        .position(|&k| k == last)
        .ok_or_else(|| Error::QuantConfig(format!("{last} is not a decoder subnet")))?
        + 1;
    model.validate()?;
    for b in &model.branches {
        for kind in SubnetKind::DECODER {
            if !b.subnet(kind).is_float() {
                return Err(Error::QuantConfig(format!("branch {} {kind} is already quantized", b.name)));
            }
        }
    }
    let grid = config.grid()?;
    let mut current = model.clone();
    let mut steps = Vec::with_capacity(3);
    for kind in SubnetKind::DECODER.into_iter().take(n_steps) {
        let bits = config.weight_bits(kind).expect("decoder subnets have a width");
        let mut decisions = Vec::new();
        for b in 0..current.branches.len() {
            let in_spec = if kind == SubnetKind::GS {
                let (spec, score) = cal.calibrate_synthesis_input(&current, b, &grid)?;
                decisions.push(LayerDecision {
                    layer: format!("{}.inverse_gain", current.branches[b].name),
                    weight_bits: None,
                    in_spec: current.branches[b].h_mu.last().out_spec().expect("h_mu is integer"),
                    out_spec: spec,
                    source: SpecSource::Searched,
                    score: Some(score),
                });
                spec
            } else {
                HYPER_SPEC
            };
            decisions.extend(quantize_subnet(cal, &mut current, b, kind, in_spec, bits, &grid)?);
        }
        current.validate()?;
        check_certificates(&current)?;
        let scores = cal.score(&current)?;
        steps.push(PipelineStep {
            report: StepReport {
                precision: format_precision(current.precision_label()),
                subnet: kind,
                scores,
                decisions,
            },
            model: current.clone(),
        });
    }
    Ok(PipelineOutput { steps })
}
