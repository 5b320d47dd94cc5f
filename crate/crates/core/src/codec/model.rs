//! Codec topology and the mixed-precision executor.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::entropy::EntropyTables;
use crate::error::{Error, Result};
use crate::tensor::{
    add_float, add_int, dequantize_tensor, leaky_relu_float, quantize_tensor, ActSpec, Activation, Backend,
    ConvGeometry, FloatConv, FloatTensor, QConvLayer, QTensor, Shape,
};

/// A tensor flowing through a partially quantized network.
#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Float(FloatTensor),
    Int(QTensor),
}

impl Value {
    pub fn shape(&self) -> Shape {
        match self {
            Value::Float(t) => t.shape(),
            Value::Int(t) => t.shape(),
        }
    }

    pub fn to_float(&self) -> FloatTensor {
        match self {
            Value::Float(t) => t.clone(),
            Value::Int(t) => dequantize_tensor(t),
        }
    }

    /// The integer tensor in `spec`; floats are quantized, integers must already match.
    pub fn to_int(&self, spec: ActSpec) -> Result<QTensor> {
        match self {
            Value::Float(t) => Ok(quantize_tensor(t, spec)),
            Value::Int(t) if t.spec() == spec => Ok(t.clone()),
            Value::Int(t) => Err(Error::SpecMismatch {
                expected: spec.to_string(),
                actual: t.spec().to_string(),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerParams {
    Float(FloatConv),
    Int(QConvLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub activation: Activation,
    pub params: LayerParams,
}

impl Layer {
    pub fn float(name: impl Into<String>, conv: FloatConv, activation: Activation) -> Self {
        Layer {
            name: name.into(),
            activation,
            params: LayerParams::Float(conv),
        }
    }

    pub fn geometry(&self) -> &ConvGeometry {
        match &self.params {
            LayerParams::Float(c) => &c.geometry,
            LayerParams::Int(q) => q.geometry(),
        }
    }

    pub fn is_int(&self) -> bool {
        matches!(self.params, LayerParams::Int(_))
    }

    pub fn as_int(&self) -> Option<&QConvLayer> {
        match &self.params {
            LayerParams::Int(q) => Some(q),
            LayerParams::Float(_) => None,
        }
    }

    pub fn as_float(&self) -> Option<&FloatConv> {
        match &self.params {
            LayerParams::Float(c) => Some(c),
            LayerParams::Int(_) => None,
        }
    }

    pub fn in_spec(&self) -> Option<ActSpec> {
        self.as_int().map(|q| q.in_spec())
    }

    pub fn out_spec(&self) -> Option<ActSpec> {
        self.as_int().map(|q| q.out_spec())
    }

    pub fn forward(&self, input: &Value, backend: Backend) -> Result<Value> {
        match &self.params {
            LayerParams::Int(q) => {
                let x = input.to_int(q.in_spec())?;
                Ok(Value::Int(q.forward(&x, backend)?))
            }
            LayerParams::Float(c) => {
                let y = c.forward(&input.to_float(), backend)?;
                Ok(Value::Float(match self.activation {
                    Activation::None => y,
                    Activation::LeakyShift(s) => leaky_relu_float(&y, s),
                }))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Block {
    Conv(Layer),
    /// `x + second(first(x))`.
    Residual { first: Layer, second: Layer },
}

impl Block {
    pub fn layers(&self) -> Vec<&Layer> {
        match self {
            Block::Conv(l) => vec![l],
            Block::Residual { first, second } => vec![first, second],
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut Layer> {
        match self {
            Block::Conv(l) => vec![l],
            Block::Residual { first, second } => vec![first, second],
        }
    }
}

/// Position of a layer inside a subnet, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerRole {
    Plain,
    ResidualFirst,
    /// Output format is tied to the residual block's input.
    ResidualSecond,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    Layer(usize),
    Save,
    AddSaved,
}

/// Executor state between ops: the running value and the residual skip.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecState {
    value: Value,
    saved: Option<Value>,
    next_op: usize,
}

impl ExecState {
    pub fn value(&self) -> &Value {
        &self.value
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Subnet {
    blocks: Vec<Block>,
    ops: Vec<Op>,
}

impl Subnet {
    pub fn new(blocks: Vec<Block>) -> Self {
        let mut ops = Vec::new();
        let mut idx = 0;
        for b in &blocks {
            match b {
                Block::Conv(_) => {
                    ops.push(Op::Layer(idx));
                    idx += 1;
                }
                Block::Residual { .. } => {
                    ops.extend([Op::Save, Op::Layer(idx), Op::Layer(idx + 1), Op::AddSaved]);
                    idx += 2;
                }
            }
        }
        Subnet { blocks, ops }
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn layers(&self) -> Vec<&Layer> {
        self.blocks.iter().flat_map(|b| b.layers()).collect()
    }

    pub fn layer_count(&self) -> usize {
        self.blocks.iter().map(|b| b.layers().len()).sum()
    }

    pub fn layer(&self, idx: usize) -> &Layer {
        self.layers()[idx]
    }

    pub fn layer_mut(&mut self, idx: usize) -> &mut Layer {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.layers_mut())
            .nth(idx)
            .expect("layer index in range")
    }

    pub fn roles(&self) -> Vec<LayerRole> {
        self.blocks
            .iter()
            .flat_map(|b| match b {
                Block::Conv(_) => vec![LayerRole::Plain],
                Block::Residual { .. } => vec![LayerRole::ResidualFirst, LayerRole::ResidualSecond],
            })
            .collect()
    }

    /// Index of the layer whose input is the skip of residual layer `idx`,
    /// i.e. the layer producing the residual block input (None for the subnet input).
    pub fn residual_source(&self, idx: usize) -> Option<usize> {
        match self.roles()[idx] {
            LayerRole::ResidualFirst => idx.checked_sub(1),
            LayerRole::ResidualSecond => idx.checked_sub(2),
            LayerRole::Plain => None,
        }
    }

    pub fn first(&self) -> &Layer {
        self.layer(0)
    }

    pub fn last(&self) -> &Layer {
        self.layer(self.layer_count() - 1)
    }

    pub fn is_int(&self) -> bool {
        self.layers().iter().all(|l| l.is_int())
    }

    pub fn is_float(&self) -> bool {
        self.layers().iter().all(|l| !l.is_int())
    }

    pub fn start(&self, input: Value) -> ExecState {
        ExecState {
            value: input,
            saved: None,
            next_op: 0,
        }
    }

    /// Runs ops until the one that applies layer `stop_layer` (exclusive),
    /// or to the end when `stop_layer` is None.
    pub fn run(&self, mut state: ExecState, stop_layer: Option<usize>, backend: Backend) -> Result<ExecState> {
        let layers = self.layers();
        while state.next_op < self.ops.len() {
            match self.ops[state.next_op] {
                Op::Layer(i) => {
                    if Some(i) == stop_layer {
                        return Ok(state);
                    }
                    state.value = layers[i].forward(&state.value, backend)?;
                }
                Op::Save => state.saved = Some(state.value.clone()),
                Op::AddSaved => {
                    let skip = state
                        .saved
                        .take()
                        .ok_or_else(|| Error::Model("residual add without saved input".into()))?;
                    state.value = add_values(&skip, &state.value)?;
                }
            }
            state.next_op += 1;
        }
        Ok(state)
    }

    pub fn forward(&self, input: Value, backend: Backend) -> Result<Value> {
        Ok(self.run(self.start(input), None, backend)?.value)
    }
}

fn add_values(a: &Value, b: &Value) -> Result<Value> {
    match (a, b) {
        (Value::Int(x), Value::Int(y)) if x.spec() == y.spec() => Ok(Value::Int(add_int(x, y)?)),
        _ => Ok(Value::Float(add_float(&a.to_float(), &b.to_float())?)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubnetKind {
    #[serde(rename = "g_a")]
    GA,
    #[serde(rename = "h_a")]
    HA,
    #[serde(rename = "h_mu")]
    HMu,
    #[serde(rename = "h_sigma")]
    HSigma,
    #[serde(rename = "g_s")]
    GS,
}

impl SubnetKind {
    pub const ALL: [SubnetKind; 5] = [
        SubnetKind::GA,
        SubnetKind::HA,
        SubnetKind::HMu,
        SubnetKind::HSigma,
        SubnetKind::GS,
    ];
    pub const DECODER: [SubnetKind; 3] = [SubnetKind::HSigma, SubnetKind::HMu, SubnetKind::GS];

    pub fn name(self) -> &'static str {
        match self {
            SubnetKind::GA => "g_a",
            SubnetKind::HA => "h_a",
            SubnetKind::HMu => "h_mu",
            SubnetKind::HSigma => "h_sigma",
            SubnetKind::GS => "g_s",
        }
    }
}

impl fmt::Display for SubnetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Activation format of hyper-latent symbols entering `h_mu` / `h_sigma`.
pub const HYPER_SPEC: ActSpec = ActSpec::const_new(0, 255);
/// Output format of `g_s`: integer pixel offsets from 128.
pub const PIXEL_SPEC: ActSpec = ActSpec::const_new(0, 255);
/// Largest stored inverse-gain magnitude.
pub const IG_MAX: i32 = (1 << 15) - 1;
pub const IG_MAX_EXP: u32 = 15;

/// Gain and inverse gain of one operating point.
#[derive(Debug, Clone, PartialEq)]
pub struct RatePoint {
    pub gain: Vec<f32>,
    pub inverse_gain: Vec<f32>,
    /// `round(inverse_gain * 2^exp)`.
    pub inverse_gain_q: Vec<i32>,
    pub inverse_gain_exp: u32,
    /// Extrapolated rather than trained.
    pub derived: bool,
}

impl RatePoint {
    pub fn new(gain: Vec<f32>, inverse_gain: Vec<f32>, derived: bool) -> Result<Self> {
        if gain.len() != inverse_gain.len()
            || gain.iter().chain(&inverse_gain).any(|g| !(*g > 0.0 && g.is_finite()))
        {
            return Err(Error::Model("gain vectors must be positive, finite and equally long".into()));
        }
        let max_ig = inverse_gain.iter().fold(0.0f64, |m, &v| m.max(v as f64));
        let exp = (0..=IG_MAX_EXP)
            .rev()
            .find(|&g| (max_ig * (1u32 << g) as f64).round() <= IG_MAX as f64)
            .ok_or_else(|| Error::Model(format!("inverse gain {max_ig} too large for 16 bits")))?;
        let inverse_gain_q = inverse_gain
            .iter()
            .map(|&v| (v as f64 * (1u32 << exp) as f64).round() as i32)
            .collect::<Vec<_>>();
        if inverse_gain_q.contains(&0) {
            return Err(Error::Model("inverse gain underflows its fixed-point format".into()));
        }
        Ok(RatePoint {
            gain,
            inverse_gain,
            inverse_gain_q,
            inverse_gain_exp: exp,
            derived,
        })
    }

    pub fn identity(channels: usize) -> Self {
        Self::new(vec![1.0; channels], vec![1.0; channels], false).expect("unit gains are valid")
    }

    pub fn channels(&self) -> usize {
        self.gain.len()
    }

    pub fn validate(&self) -> Result<()> {
        let fresh = Self::new(self.gain.clone(), self.inverse_gain.clone(), self.derived)?;
        if fresh.inverse_gain_q != self.inverse_gain_q || fresh.inverse_gain_exp != self.inverse_gain_exp {
            return Err(Error::Model("fixed-point inverse gain does not match its float source".into()));
        }
        Ok(())
    }
}

/// One colour branch (luma or the two chroma planes) with its five subnets.
#[derive(Debug, Clone, PartialEq)]
pub struct Branch {
    pub name: String,
    pub in_channels: usize,
    /// Plane subsampling relative to luma (1 or 2).
    pub subsampling: usize,
    pub g_a: Subnet,
    pub h_a: Subnet,
    pub h_mu: Subnet,
    pub h_sigma: Subnet,
    pub g_s: Subnet,
    pub rate_points: Vec<RatePoint>,
}

impl Branch {
    pub fn subnet(&self, kind: SubnetKind) -> &Subnet {
        match kind {
            SubnetKind::GA => &self.g_a,
            SubnetKind::HA => &self.h_a,
            SubnetKind::HMu => &self.h_mu,
            SubnetKind::HSigma => &self.h_sigma,
            SubnetKind::GS => &self.g_s,
        }
    }

    pub fn subnet_mut(&mut self, kind: SubnetKind) -> &mut Subnet {
        match kind {
            SubnetKind::GA => &mut self.g_a,
            SubnetKind::HA => &mut self.h_a,
            SubnetKind::HMu => &mut self.h_mu,
            SubnetKind::HSigma => &mut self.h_sigma,
            SubnetKind::GS => &mut self.g_s,
        }
    }

    pub fn latent_channels(&self) -> usize {
        self.g_a.last().geometry().out_channels
    }

    pub fn hyper_channels(&self) -> usize {
        self.h_a.last().geometry().out_channels
    }

    /// Product of strides through `g_a`.
    pub fn latent_stride(&self) -> usize {
        self.g_a.layers().iter().map(|l| l.geometry().stride).product()
    }

    pub fn hyper_stride(&self) -> usize {
        self.latent_stride() * self.h_a.layers().iter().map(|l| l.geometry().stride).product::<usize>()
    }

    /// Luma-pixel multiple that every image dimension must have.
    pub fn alignment(&self) -> usize {
        self.hyper_stride() * self.subsampling
    }

    /// Checks the structural invariants of a branch.
    pub fn validate(&self) -> Result<()> {
        let ctx = |msg: String| Error::Model(format!("branch {}: {msg}", self.name));
        if !matches!(self.subsampling, 1 | 2) {
            return Err(ctx(format!("subsampling {}", self.subsampling)));
        }
        for kind in SubnetKind::ALL {
            let net = self.subnet(kind);
            if net.layer_count() == 0 {
                return Err(ctx(format!("{kind} has no layers")));
            }
            if matches!(kind, SubnetKind::GA | SubnetKind::HA) && !net.is_float() {
                return Err(ctx(format!("{kind} must stay in floating point")));
            }
            check_chain(net).map_err(|e| ctx(format!("{kind}: {e}")))?;
        }
        let latent = self.latent_channels();
        let hyper = self.hyper_channels();
        let expect_in = [
            (SubnetKind::GA, self.in_channels),
            (SubnetKind::HA, latent),
            (SubnetKind::HMu, hyper),
            (SubnetKind::HSigma, hyper),
            (SubnetKind::GS, latent),
        ];
        let expect_out = [
            (SubnetKind::HMu, latent),
            (SubnetKind::HSigma, latent),
            (SubnetKind::GS, self.in_channels),
        ];
        for (kind, c) in expect_in {
            if self.subnet(kind).first().geometry().in_channels != c {
                return Err(ctx(format!("{kind} expects {} input channels, not {c}", self.subnet(kind).first().geometry().in_channels)));
            }
        }
        for (kind, c) in expect_out {
            if self.subnet(kind).last().geometry().out_channels != c {
                return Err(ctx(format!("{kind} produces {} channels, not {c}", self.subnet(kind).last().geometry().out_channels)));
            }
        }
        for kind in [SubnetKind::HMu, SubnetKind::HSigma] {
            if let Some(spec) = self.subnet(kind).first().in_spec() {
                if spec != HYPER_SPEC {
                    return Err(ctx(format!("{kind} input format {spec}, expected {HYPER_SPEC}")));
                }
            }
        }
        if let Some(spec) = self.g_s.last().out_spec() {
            if spec != PIXEL_SPEC {
                return Err(ctx(format!("g_s output format {spec}, expected {PIXEL_SPEC}")));
            }
        }
        if self.g_s.first().is_int() && !self.h_mu.last().is_int() {
            return Err(ctx("integer g_s needs an integer h_mu".into()));
        }
        if self.rate_points.len() != 5 || self.rate_points.iter().filter(|r| r.derived).count() != 1 {
            return Err(ctx("expected four trained and one derived rate point".into()));
        }
        for rp in &self.rate_points {
            if rp.channels() != latent {
                return Err(ctx(format!("gain vector of length {} for {latent} channels", rp.channels())));
            }
            rp.validate().map_err(|e| ctx(e.to_string()))?;
            if let (Some(mu), Some(gs)) = (self.h_mu.last().out_spec(), self.g_s.first().in_spec()) {
                if self.g_s.first().is_int() && gs.scale_exp() > rp.inverse_gain_exp + mu.scale_exp() {
                    return Err(ctx(format!(
                        "inverse gain to {gs} needs a negative shift from {mu} at exponent {}",
                        rp.inverse_gain_exp
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Integer layers must read what their integer predecessor writes, and a
/// residual block's second layer must write its block input format.
fn check_chain(net: &Subnet) -> Result<()> {
    let layers = net.layers();
    let roles = net.roles();
    let mut prev_out: Option<ActSpec> = None;
    let mut block_in: Option<ActSpec> = None;
    for (i, layer) in layers.iter().enumerate() {
        if roles[i] == LayerRole::ResidualFirst {
            block_in = prev_out;
        }
        if let (Some(p), Some(inp)) = (prev_out, layer.in_spec()) {
            if p != inp {
                return Err(Error::SpecMismatch {
                    expected: p.to_string(),
                    actual: format!("{inp} at layer {}", layer.name),
                });
            }
        }
        if let Some(q) = layer.as_int() {
            if q.activation() != layer.activation {
                return Err(Error::Model(format!("layer {} activation mismatch", layer.name)));
            }
        }
        let mut out = layer.out_spec();
        if roles[i] == LayerRole::ResidualSecond {
            if let (Some(b), Some(o)) = (block_in, out) {
                if b != o {
                    return Err(Error::Model(format!(
                        "residual layer {} writes {o} but its block input is {b}",
                        layer.name
                    )));
                }
            }
            // the sum is integer only if both operands are
            if block_in.is_none() || out.is_none() {
                out = None;
            }
        }
        prev_out = out;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prng: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// The full codec: Y and UV branches sharing one set of entropy tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub provenance: Provenance,
    pub leaky_shift: u32,
    pub branches: Vec<Branch>,
    pub entropy: EntropyTables,
}

impl ModelGraph {
    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Model("model has no branches".into()));
        }
        for b in &self.branches {
            b.validate()?;
        }
        let n = self.branches[0].rate_points.len();
        if self.branches.iter().any(|b| b.rate_points.len() != n) {
            return Err(Error::Model("branches disagree on the number of rate points".into()));
        }
        Ok(())
    }

    pub fn rate_point_count(&self) -> usize {
        self.branches.first().map_or(0, |b| b.rate_points.len())
    }

    /// Luma-pixel multiple required of image dimensions.
    pub fn alignment(&self) -> usize {
        self.branches.iter().map(|b| b.alignment()).max().unwrap_or(1)
    }

    /// `(bits of h_sigma, h_mu, g_s)` where `None` means floating point or mixed.
    pub fn precision_label(&self) -> [Option<u32>; 3] {
        SubnetKind::DECODER.map(|kind| {
            let bits: Vec<Option<u32>> = self
                .branches
                .iter()
                .flat_map(|b| b.subnet(kind).layers())
                .map(|l| l.as_int().map(|q| q.weight_bits()))
                .collect();
            match bits.first() {
                Some(&Some(b)) if bits.iter().all(|&x| x == Some(b)) => Some(b),
                _ => None,
            }
        })
    }

    pub fn is_fully_quantized(&self) -> bool {
        self.precision_label().iter().all(|b| b.is_some())
    }
}

/// Formats a precision triple as `(int8,int16,-)`.
pub fn format_precision(label: [Option<u32>; 3]) -> String {
    let parts: Vec<String> = label
        .iter()
        .map(|b| b.map_or_else(|| "-".to_string(), |b| format!("int{b}")))
        .collect();
    format!("({})", parts.join(","))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ConvGeometry;

    fn conv(name: &str, cin: usize, cout: usize, w: f32, act: Activation) -> Layer {
        let g = ConvGeometry::conv(cin, cout, 1, 1, 0);
        Layer::float(name, FloatConv::new(g, vec![w; cin * cout], vec![0.0; cout]).unwrap(), act)
    }

    #[test]
    fn residual_executor() {
        let net = Subnet::new(vec![
            Block::Conv(conv("a", 1, 2, 2.0, Activation::None)),
            Block::Residual {
                first: conv("b", 2, 2, 1.0, Activation::LeakyShift(3)),
                second: conv("c", 2, 2, 0.5, Activation::None),
            },
        ]);
        assert_eq!(net.layer_count(), 3);
        assert_eq!(
            net.roles(),
            vec![LayerRole::Plain, LayerRole::ResidualFirst, LayerRole::ResidualSecond]
        );
        let x = FloatTensor::new(Shape::new(1, 1, 2), vec![1.0, -1.0]).unwrap();
        let y = net.forward(Value::Float(x.clone()), Backend::Reference).unwrap().to_float();
        // a: [2, -2] on both channels; b: [4, -0.5]; c: [4, -0.5]; sum: [6, -2.5]
        assert_eq!(y.data(), &[6.0, -2.5, 6.0, -2.5]);

        let st = net.run(net.start(Value::Float(x)), Some(2), Backend::Reference).unwrap();
        assert_eq!(st.value().to_float().data(), &[4.0, -0.5, 4.0, -0.5]);
        let resumed = net.run(st, None, Backend::Reference).unwrap();
        assert_eq!(resumed.value().to_float(), y);
    }

    #[test]
    fn rate_point_fixed_point() {
        let rp = RatePoint::new(vec![2.0, 4.0], vec![0.5, 0.25], false).unwrap();
        assert_eq!(rp.inverse_gain_exp, 15);
        assert_eq!(rp.inverse_gain_q, vec![16384, 8192]);
        let id = RatePoint::identity(3);
        assert_eq!(id.inverse_gain_exp, 14);
        assert_eq!(id.inverse_gain_q, vec![16384; 3]);
        let big = RatePoint::new(vec![1.0 / 3.0], vec![3.0], false).unwrap();
        assert_eq!(big.inverse_gain_exp, 13);
        assert_eq!(big.inverse_gain_q, vec![24576]);
        assert!(RatePoint::new(vec![1.0], vec![-1.0], false).is_err());
    }

    #[test]
    fn precision_labels() {
        assert_eq!(format_precision([Some(8), Some(16), None]), "(int8,int16,-)");
        assert_eq!(format_precision([None; 3]), "(-,-,-)");
    }
}
