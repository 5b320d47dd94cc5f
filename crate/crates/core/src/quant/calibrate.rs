//! Activation-format search: each candidate is scored by the mixed BD-rate of
//! the partially quantized model against the float anchor on a calibration set.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::channel::{quantize_layer, WeightBits};
use crate::codec::{
    analyze, apply_inverse_gain, assemble, branch_inputs, estimate_rate, latent_from_residuals, residuals,
    scale_bins, synthesize, Branch, ExecState, LayerParams, LayerRole, ModelGraph, Subnet, SubnetKind, Value,
    HYPER_SPEC,
};
use crate::error::{Error, Result};
use crate::image::YuvImage;
use crate::metrics::{bd_rate, curve_for, mixed_bd_rate, Metric, QualityReport, RdCurve};
use crate::tensor::{ActSpec, Backend, FloatTensor, QConvLayer, QTensor};

/// Clip bounds of the default search grid.
pub const GRID_CLIPS: [i32; 4] = [(1 << 15) - 1, (1 << 14) - 1, (1 << 13) - 1, (1 << 12) - 1];

/// Calibration runs on one backend; the choice of backend does not matter
/// for the float anchor as long as it is fixed.
const CALIB_BACKEND: Backend = Backend::Reference;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantConfig {
    #[serde(default = "default_bits")]
    pub h_mu_bits: WeightBits,
    #[serde(default = "default_bits")]
    pub g_s_bits: WeightBits,
    /// Pin every searched clip bound to `2^15 - 1`; only the scale is searched.
    #[serde(default)]
    pub fixed_clip_mode: bool,
    #[serde(default = "default_scale_exps")]
    pub scale_exps: Vec<u32>,
    #[serde(default = "default_clips")]
    pub clips: Vec<i32>,
}

fn default_bits() -> WeightBits {
    WeightBits::Int16
}

fn default_scale_exps() -> Vec<u32> {
    (0..=ActSpec::MAX_SCALE_EXP).collect()
}

fn default_clips() -> Vec<i32> {
    GRID_CLIPS.to_vec()
}

impl QuantConfig {
    pub fn new(h_mu_bits: WeightBits, g_s_bits: WeightBits) -> Self {
        QuantConfig {
            h_mu_bits,
            g_s_bits,
            fixed_clip_mode: false,
            scale_exps: default_scale_exps(),
            clips: default_clips(),
        }
    }

    /// `h_sigma` is always 8-bit.
    pub fn weight_bits(&self, kind: SubnetKind) -> Option<WeightBits> {
        match kind {
            SubnetKind::HSigma => Some(WeightBits::Int8),
            SubnetKind::HMu => Some(self.h_mu_bits),
            SubnetKind::GS => Some(self.g_s_bits),
            SubnetKind::GA | SubnetKind::HA => None,
        }
    }

    /// Label in the `w16a16` style; the activation width is always 16.
    pub fn label(&self) -> String {
        let w = self.h_mu_bits.bits().max(self.g_s_bits.bits());
        let clip = if self.fixed_clip_mode { "-fixed" } else { "" };
        format!("w{w}a16{clip}")
    }

    /// Candidate activation formats, deduplicated, in grid order.
    pub fn grid(&self) -> Result<Vec<ActSpec>> {
        let clips = if self.fixed_clip_mode {
            vec![ActSpec::MAX_CLIP]
        } else {
            self.clips.clone()
        };
        let mut out = Vec::new();
        for clip in clips {
            for &a in &self.scale_exps {
                let spec = ActSpec::new(a, clip)?;
                if !out.contains(&spec) {
                    out.push(spec);
                }
            }
        }
        if out.is_empty() {
            return Err(Error::QuantConfig("empty activation grid".into()));
        }
        Ok(out)
    }
}

/// True when `a` should win over `b` at equal score: larger clip, then larger scale.
fn preferred_on_tie(a: ActSpec, b: ActSpec) -> bool {
    (a.clip(), a.scale_exp()) > (b.clip(), b.scale_exp())
}

/// Picks the grid entry with the lowest objective. `Ok(None)` from the
/// objective marks an infeasible candidate; NaN scores count as infinite.
/// Ties go to the larger clip bound, then the larger scale exponent.
/// Returns the first error if no candidate is feasible.
pub fn select_act_spec<F>(grid: &[ActSpec], objective: F) -> Result<(ActSpec, f64)>
where
    F: Fn(ActSpec) -> Result<Option<f64>> + Sync,
{
    if grid.is_empty() {
        return Err(Error::QuantConfig("empty activation grid".into()));
    }
    let scored: Vec<Result<Option<f64>>> = grid.par_iter().map(|&s| objective(s)).collect();
    let mut best: Option<(ActSpec, f64)> = None;
    let mut first_err = None;
    for (&spec, r) in grid.iter().zip(scored) {
        let score = match r {
            Ok(Some(s)) if s.is_nan() => f64::INFINITY,
            Ok(Some(s)) => s,
            Ok(None) => continue,
            Err(e) => {
                first_err.get_or_insert(e);
                continue;
            }
        };
        let better = match best {
            None => true,
            Some((b, bs)) => score < bs || (score == bs && preferred_on_tie(spec, b)),
        };
        if better {
            best = Some((spec, score));
        }
    }
    best.ok_or_else(|| first_err.unwrap_or_else(|| Error::QuantConfig("no feasible activation format".into())))
}

#[derive(Debug, Clone)]
pub struct CalibrationSet {
    images: Vec<YuvImage>,
}

impl CalibrationSet {
    pub fn new(images: Vec<YuvImage>) -> Result<Self> {
        if images.is_empty() {
            return Err(Error::QuantConfig("empty calibration set".into()));
        }
        Ok(CalibrationSet { images })
    }

    pub fn images(&self) -> &[YuvImage] {
        &self.images
    }
}

/// BD-rates of a model against the anchor, in percent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BdScores {
    pub yuv_psnr: f64,
    pub ms_ssim: f64,
    pub mixed: f64,
}

/// Per-branch quantities a candidate may change.
#[derive(Debug, Clone)]
struct BranchState {
    bins: Vec<usize>,
    r: Vec<i32>,
    r_bits: f64,
    y_hat: Value,
    output: Value,
}

/// Encoder-side results that never change during quantization.
#[derive(Debug, Clone)]
struct Fixed {
    y_gained: FloatTensor,
    z_hat: QTensor,
    z_bits: f64,
}

struct Sample {
    image: usize,
    rate_point: usize,
    fixed: Vec<Fixed>,
}

/// Which layer a search is for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerTarget {
    pub branch: usize,
    pub kind: SubnetKind,
    pub layer: usize,
}

/// Caches the encoder side and the anchor curves of a calibration set.
pub struct Calibrator {
    calib: CalibrationSet,
    samples: Vec<Sample>,
    rate_points: usize,
    /// YUV-PSNR and MS-SSIM curves of the float model.
    anchor: Vec<RdCurve>,
}

const CURVE_METRICS: [Metric; 2] = [Metric::YuvPsnr, Metric::MsSsim];

fn branch_state(model: &ModelGraph, branch: &Branch, fixed: &Fixed, rp: usize) -> Result<BranchState> {
    let z = Value::Int(fixed.z_hat.clone());
    let sigma = branch.h_sigma.forward(z.clone(), CALIB_BACKEND)?;
    let mu = branch.h_mu.forward(z, CALIB_BACKEND)?;
    let bins = scale_bins(&sigma, &model.entropy);
    let r = residuals(&fixed.y_gained, &mu)?;
    let r_bits = estimate_rate(&r, &bins, &model.entropy)?;
    let y_hat = latent_from_residuals(&r, &mu)?;
    let output = synthesize(branch, &branch.rate_points[rp], &y_hat, CALIB_BACKEND)?;
    Ok(BranchState {
        bins,
        r,
        r_bits,
        y_hat,
        output,
    })
}

/// Integer inverse gain into `spec`, from an integer latent.
fn synthesis_input(branch: &Branch, rp: usize, y_hat: &Value, spec: ActSpec) -> Result<Value> {
    match y_hat {
        Value::Int(q) => Ok(Value::Int(apply_inverse_gain(q, &branch.rate_points[rp], spec)?)),
        Value::Float(_) => Err(Error::Model("integer g_s input needs an integer h_mu".into())),
    }
}

impl Calibrator {
    /// Runs the encoder side once per image and rate point and measures the
    /// anchor. Fails if any image cannot be coded by the anchor.
    pub fn new(anchor: &ModelGraph, calib: CalibrationSet) -> Result<Self> {
        anchor.validate()?;
        let rate_points = anchor.rate_point_count();
        let jobs: Vec<(usize, usize)> = (0..calib.images.len())
            .flat_map(|i| (0..rate_points).map(move |rp| (i, rp)))
            .collect();
        let samples = jobs
            .par_iter()
            .map(|&(image, rate_point)| {
                let padded = calib.images[image].pad_to_multiple(anchor.alignment());
                let inputs = branch_inputs(&padded, anchor)?;
                let fixed = anchor
                    .branches
                    .iter()
                    .zip(&inputs)
                    .map(|(b, x)| {
                        let an = analyze(b, x, &b.rate_points[rate_point], CALIB_BACKEND)?;
                        let hb = vec![anchor.entropy.hyper_bin(); an.z_hat.data().len()];
                        let z_bits = estimate_rate(an.z_hat.data(), &hb, &anchor.entropy)?;
                        Ok(Fixed {
                            y_gained: an.y_gained,
                            z_hat: an.z_hat,
                            z_bits,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(Sample {
                    image,
                    rate_point,
                    fixed,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let mut cal = Calibrator {
            calib,
            samples,
            rate_points,
            anchor: Vec::new(),
        };
        let states = cal.states(anchor)?;
        let reports = cal.reports(&states)?;
        cal.anchor = CURVE_METRICS
            .iter()
            .map(|&m| curve_for(&reports, m))
            .collect::<Result<_>>()?;
        Ok(cal)
    }

    pub fn calibration_set(&self) -> &CalibrationSet {
        &self.calib
    }

    fn states(&self, model: &ModelGraph) -> Result<Vec<Vec<BranchState>>> {
        self.samples
            .par_iter()
            .map(|s| {
                model
                    .branches
                    .iter()
                    .zip(&s.fixed)
                    .map(|(b, f)| branch_state(model, b, f, s.rate_point))
                    .collect()
            })
            .collect()
    }

    fn report(&self, sample: &Sample, fixed_bits: f64, states: &[&BranchState]) -> Result<QualityReport> {
        let original = &self.calib.images[sample.image];
        let outputs: Vec<Value> = states.iter().map(|s| s.output.clone()).collect();
        let recon = assemble(&outputs, original.width(), original.height())?;
        let bits = fixed_bits + states.iter().map(|s| s.r_bits).sum::<f64>();
        let bpp = bits / (original.width() * original.height()) as f64;
        QualityReport::measure(original, &recon, bpp)
    }

    /// Mean quality per rate point.
    fn reports(&self, states: &[Vec<BranchState>]) -> Result<Vec<QualityReport>> {
        let mut per_rp: Vec<Vec<QualityReport>> = vec![Vec::new(); self.rate_points];
        for (s, r) in self.samples.iter().zip(self.sample_reports(states)?) {
            per_rp[s.rate_point].push(r);
        }
        per_rp.iter().map(|r| QualityReport::mean(r)).collect()
    }

    fn scores_from_reports(&self, reports: &[QualityReport]) -> Result<BdScores> {
        let yuv_psnr = bd_rate(&self.anchor[0], &curve_for(reports, Metric::YuvPsnr)?)?;
        let ms_ssim = bd_rate(&self.anchor[1], &curve_for(reports, Metric::MsSsim)?)?;
        Ok(BdScores {
            yuv_psnr,
            ms_ssim,
            mixed: mixed_bd_rate(yuv_psnr, ms_ssim),
        })
    }

    /// BD-rates of `model` against the anchor on the calibration set.
    pub fn score(&self, model: &ModelGraph) -> Result<BdScores> {
        let states = self.states(model)?;
        self.scores_from_reports(&self.reports(&states)?)
    }

    /// Per-sample reports for cached states.
    fn sample_reports(&self, states: &[Vec<BranchState>]) -> Result<Vec<QualityReport>> {
        self.samples
            .par_iter()
            .zip(states)
            .map(|(s, st)| {
                let z_bits = s.fixed.iter().map(|f| f.z_bits).sum();
                self.report(s, z_bits, &st.iter().collect::<Vec<_>>())
            })
            .collect()
    }

    /// Scores a model in which only `branch` differs from the cached states.
    /// With `rate_only` the reconstruction is known to be unchanged and the
    /// cached qualities in `base` are reused.
    fn score_branch<F>(
        &self,
        states: &[Vec<BranchState>],
        base: &[QualityReport],
        branch: usize,
        rate_only: bool,
        f: F,
    ) -> Result<f64>
    where
        F: Fn(usize, &BranchState) -> Result<BranchState>,
    {
        let mut per_rp: Vec<Vec<QualityReport>> = vec![Vec::new(); self.rate_points];
        for (i, (s, st)) in self.samples.iter().zip(states).enumerate() {
            let changed = f(i, &st[branch])?;
            let refs: Vec<&BranchState> = st
                .iter()
                .enumerate()
                .map(|(b, x)| if b == branch { &changed } else { x })
                .collect();
            let z_bits: f64 = s.fixed.iter().map(|f| f.z_bits).sum();
            let report = if rate_only {
                let original = &self.calib.images[s.image];
                let bits = z_bits + refs.iter().map(|x| x.r_bits).sum::<f64>();
                QualityReport {
                    rate_bpp: bits / (original.width() * original.height()) as f64,
                    ..base[i]
                }
            } else {
                self.report(s, z_bits, &refs)?
            };
            per_rp[s.rate_point].push(report);
        }
        let reports = per_rp.iter().map(|r| QualityReport::mean(r)).collect::<Result<Vec<_>>>()?;
        // a curve the BD fit cannot use ranks last rather than aborting the search
        Ok(self.scores_from_reports(&reports).map_or(f64::INFINITY, |s| s.mixed))
    }

    /// Chooses the format `g_s` reads, i.e. the output of the integer inverse
    /// gain, with `h_mu` already quantized and `g_s` still float.
    pub fn calibrate_synthesis_input(&self, model: &ModelGraph, branch: usize, grid: &[ActSpec]) -> Result<(ActSpec, f64)> {
        let br = &model.branches[branch];
        let mu_spec = br
            .h_mu
            .last()
            .out_spec()
            .ok_or_else(|| Error::Model("integer g_s input needs an integer h_mu".into()))?;
        let max_a = br.rate_points.iter().map(|rp| rp.inverse_gain_exp).min().unwrap_or(0) + mu_spec.scale_exp();
        let states = self.states(model)?;
        select_act_spec(grid, |spec| {
            if spec.scale_exp() > max_a {
                return Ok(None);
            }
            self.score_branch(&states, &[], branch, false, |i, st| {
                let rp = self.samples[i].rate_point;
                let x = synthesis_input(br, rp, &st.y_hat, spec)?;
                Ok(BranchState {
                    output: br.g_s.forward(x, CALIB_BACKEND)?,
                    ..st.clone()
                })
            })
            .map(Some)
        })
    }

    /// Chooses the output format of one layer. Layers before it in its subnet
    /// must be integer already; `in_spec` is the format it reads (the subnet
    /// input format for the first layer). A residual block's first layer only
    /// admits formats from which its second layer can reach the block format.
    pub fn calibrate_layer(
        &self,
        model: &ModelGraph,
        target: LayerTarget,
        in_spec: ActSpec,
        bits: WeightBits,
        grid: &[ActSpec],
    ) -> Result<(ActSpec, f64)> {
        let br = model
            .branches
            .get(target.branch)
            .ok_or_else(|| Error::QuantConfig(format!("no branch {}", target.branch)))?;
        let net = br.subnet(target.kind);
        if target.layer >= net.layer_count() {
            return Err(Error::QuantConfig(format!("{} has no layer {}", target.kind, target.layer)));
        }
        let layer = net.layer(target.layer);
        let conv = layer
            .as_float()
            .ok_or_else(|| Error::QuantConfig(format!("layer {} is already quantized", layer.name)))?;
        let tied_next = (net.roles()[target.layer] == LayerRole::ResidualFirst).then(|| net.layer(target.layer + 1));

        let states = self.states(model)?;
        let snapshots = self.snapshots(model, target, in_spec, &states)?;
        let rate_only = target.kind == SubnetKind::HSigma;
        let base = if rate_only { self.sample_reports(&states)? } else { Vec::new() };
        select_act_spec(grid, |spec| {
            let q = match quantize_layer(conv, bits, in_spec, spec, layer.activation, &layer.name) {
                Ok(q) => q,
                Err(Error::NegativeShift { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            if let Some(next) = tied_next {
                let next_conv = next.as_float().ok_or_else(|| Error::Model(format!("layer {} quantized out of order", next.name)))?;
                match quantize_layer(next_conv, bits, spec, in_spec, next.activation, &next.name) {
                    Ok(_) => {}
                    Err(Error::NegativeShift { .. }) => return Ok(None),
                    Err(e) => return Err(e),
                }
            }
            let cand = with_layer(net, target.layer, q);
            self.score_branch(&states, &base, target.branch, rate_only, |i, st| {
                let rp = self.samples[i].rate_point;
                let out = cand.run(snapshots[i].clone(), None, CALIB_BACKEND)?.value().clone();
                match target.kind {
                    SubnetKind::HSigma => {
                        let bins = scale_bins(&out, &model.entropy);
                        let r_bits = estimate_rate(&st.r, &bins, &model.entropy)?;
                        Ok(BranchState {
                            bins,
                            r_bits,
                            ..st.clone()
                        })
                    }
                    SubnetKind::HMu => {
                        let fixed = &self.samples[i].fixed[target.branch];
                        let r = residuals(&fixed.y_gained, &out)?;
                        let r_bits = estimate_rate(&r, &st.bins, &model.entropy)?;
                        let y_hat = latent_from_residuals(&r, &out)?;
                        let output = synthesize(br, &br.rate_points[rp], &y_hat, CALIB_BACKEND)?;
                        Ok(BranchState {
                            bins: st.bins.clone(),
                            r,
                            r_bits,
                            y_hat,
                            output,
                        })
                    }
                    SubnetKind::GS => Ok(BranchState {
                        output: out,
                        ..st.clone()
                    }),
                    SubnetKind::GA | SubnetKind::HA => unreachable!("rejected by snapshots"),
                }
            })
            .map(Some)
        })
    }

    /// Subnet state just before `target.layer`, per sample.
    fn snapshots(
        &self,
        model: &ModelGraph,
        target: LayerTarget,
        in_spec: ActSpec,
        states: &[Vec<BranchState>],
    ) -> Result<Vec<ExecState>> {
        let br = &model.branches[target.branch];
        let net = br.subnet(target.kind);
        self.samples
            .par_iter()
            .zip(states)
            .map(|(s, st)| {
                let input = match target.kind {
                    SubnetKind::HSigma | SubnetKind::HMu => {
                        if target.layer == 0 && in_spec != HYPER_SPEC {
                            return Err(Error::QuantConfig(format!("{} reads {HYPER_SPEC}", target.kind)));
                        }
                        Value::Int(s.fixed[target.branch].z_hat.clone())
                    }
                    SubnetKind::GS => {
                        let spec = if target.layer == 0 {
                            in_spec
                        } else {
                            net.first()
                                .in_spec()
                                .ok_or_else(|| Error::Model("g_s quantized out of order".into()))?
                        };
                        synthesis_input(br, s.rate_point, &st[target.branch].y_hat, spec)?
                    }
                    SubnetKind::GA | SubnetKind::HA => {
                        return Err(Error::QuantConfig(format!("{} stays in floating point", target.kind)))
                    }
                };
                net.run(net.start(input), Some(target.layer), CALIB_BACKEND)
            })
            .collect()
    }
}

/// A copy of `net` with layer `idx` replaced by its integer version.
pub(crate) fn with_layer(net: &Subnet, idx: usize, q: QConvLayer) -> Subnet {
    let mut out = net.clone();
    out.layer_mut(idx).params = LayerParams::Int(q);
    out
}

/// One-shot form of [`Calibrator::calibrate_layer`].
pub fn calibrate_activation_spec(
    anchor: &ModelGraph,
    model: &ModelGraph,
    target: LayerTarget,
    in_spec: ActSpec,
    bits: WeightBits,
    grid: &[ActSpec],
    calib: CalibrationSet,
) -> Result<ActSpec> {
    let cal = Calibrator::new(anchor, calib)?;
    Ok(cal.calibrate_layer(model, target, in_spec, bits, grid)?.0)
}
