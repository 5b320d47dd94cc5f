//! Synthetic untrained models with predictable rate-distortion behaviour.
//!
//! The analysis transform is a three-level Haar packet decomposition with
//! small residual perturbations; synthesis applies the transposed Haar
//! filters and approximately undoes the residuals. Quality therefore rises
//! with the gain, which is all the quantizer experiments need.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::entropy::EntropyTables;
use super::model::{Block, Branch, Layer, ModelGraph, Provenance, RatePoint, Subnet};
use crate::error::Result;
use crate::tensor::{Activation, ConvGeometry, FloatConv};

pub const LEAKY_SHIFT: u32 = 3;
pub const BASE_GAINS: [f32; 4] = [2.0, 4.0, 8.0, 16.0];
/// The fifth operating point extrapolates the last trained gain by this factor.
pub const DERIVED_GAIN_FACTOR: f32 = 1.6;
const HYPER_CHANNELS: usize = 8;
const HYPER_MID: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureOptions {
    pub seed: u64,
    /// Adds exactly cancelling large weights on duplicated channels so that
    /// floating-point results depend on the accumulation order.
    pub adversarial: bool,
}

/// Magnitude of the cancelling pair in the `g_s` residual.
pub const ADVERSARIAL_GS: f32 = (1 << 20) as f32;
/// Magnitude of the cancelling pair in `h_mu`.
pub const ADVERSARIAL_HMU: f32 = (1 << 10) as f32;

fn leaky() -> Activation {
    Activation::LeakyShift(LEAKY_SHIFT)
}

fn layer(name: String, geometry: ConvGeometry, weights: Vec<f32>, bias: Vec<f32>, act: Activation) -> Layer {
    Layer::float(name, FloatConv::new(geometry, weights, bias).expect("fixture geometry"), act)
}

/// Orthonormal 2x2 Haar filters: LL, LH, HL, HH.
const HAAR: [[f32; 4]; 4] = [
    [0.5, 0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5, -0.5],
    [0.5, 0.5, -0.5, -0.5],
    [0.5, -0.5, -0.5, 0.5],
];

/// Weights of the analysis conv `c -> 4c` and, transposed, of the synthesis.
fn haar_weights(c: usize, gain: f32) -> Vec<f32> {
    // (out, in, 2, 2) for the analysis; the synthesis uses (out=c, in=4c, 2, 2)
    let mut w = vec![0.0; 4 * c * c * 4];
    for ic in 0..c {
        for (b, h) in HAAR.iter().enumerate() {
            let oc = 4 * ic + b;
            for t in 0..4 {
                w[(oc * c + ic) * 4 + t] = h[t] * gain;
            }
        }
    }
    w
}

fn haar_synthesis_weights(c: usize, gain: f32) -> Vec<f32> {
    let mut w = vec![0.0; c * 4 * c * 4];
    for oc in 0..c {
        for (b, h) in HAAR.iter().enumerate() {
            let ic = 4 * oc + b;
            for t in 0..4 {
                w[(oc * 4 * c + ic) * 4 + t] = h[t] * gain;
            }
        }
    }
    w
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, std: f32) -> Vec<f32> {
    let d = Normal::new(0.0f32, std).expect("positive std");
    (0..n).map(|_| d.sample(rng)).collect()
}

struct ResidualPair {
    conv1_w: Vec<f32>,
    conv1_b: Vec<f32>,
    conv2_w: Vec<f32>,
    conv2_b: Vec<f32>,
}

fn residual_pair(rng: &mut ChaCha8Rng, c: usize, duplicate: Option<(usize, usize)>) -> ResidualPair {
    let fan1 = (c * 9) as f32;
    let mut conv1_w = normal_vec(rng, c * c * 9, 0.3 / fan1.sqrt());
    let mut conv1_b = normal_vec(rng, c, 0.01);
    let conv2_w = normal_vec(rng, c * c, 0.1 / (c as f32).sqrt());
    let conv2_b = normal_vec(rng, c, 0.01);
    if let Some((d, e)) = duplicate {
        let row: Vec<f32> = conv1_w[d * c * 9..(d + 1) * c * 9].to_vec();
        conv1_w[e * c * 9..(e + 1) * c * 9].copy_from_slice(&row);
        conv1_b[e] = conv1_b[d];
    }
    ResidualPair {
        conv1_w,
        conv1_b,
        conv2_w,
        conv2_b,
    }
}

fn branch(
    rng: &mut ChaCha8Rng,
    name: &str,
    in_channels: usize,
    subsampling: usize,
    adversarial: bool,
) -> Branch {
    let widths = [in_channels, 4 * in_channels, 16 * in_channels, 64 * in_channels];
    let latent = widths[3];
    let res: Vec<ResidualPair> = (0..3)
        .map(|s| {
            let c = widths[s + 1];
            residual_pair(rng, c, (adversarial && s == 0).then_some((0, c - 1)))
        })
        .collect();

    // analysis
    let mut g_a = Vec::new();
    for s in 0..3 {
        let (cin, c) = (widths[s], widths[s + 1]);
        g_a.push(Block::Conv(layer(
            format!("{name}.g_a.{}", 2 * s),
            ConvGeometry::conv(cin, c, 2, 2, 0),
            haar_weights(cin, 1.0),
            vec![0.0; c],
            Activation::None,
        )));
        let r = &res[s];
        g_a.push(Block::Residual {
            first: layer(
                format!("{name}.g_a.{}a", 2 * s + 1),
                ConvGeometry::conv(c, c, 3, 1, 1),
                r.conv1_w.clone(),
                r.conv1_b.clone(),
                leaky(),
            ),
            second: layer(
                format!("{name}.g_a.{}b", 2 * s + 1),
                ConvGeometry::conv(c, c, 1, 1, 0),
                r.conv2_w.clone(),
                r.conv2_b.clone(),
                Activation::None,
            ),
        });
    }

    // synthesis mirrors the analysis; the residual subtracts what the analysis added
    let mut g_s = Vec::new();
    for s in (0..3).rev() {
        let (cout, c) = (widths[s], widths[s + 1]);
        let r = &res[s];
        let mut conv2_w: Vec<f32> = r.conv2_w.iter().map(|v| -v).collect();
        let conv2_b: Vec<f32> = r.conv2_b.iter().map(|v| -v).collect();
        if adversarial && s == 0 {
            for oc in 0..c {
                conv2_w[oc * c] += ADVERSARIAL_GS;
                conv2_w[oc * c + c - 1] -= ADVERSARIAL_GS;
            }
        }
        g_s.push(Block::Residual {
            first: layer(
                format!("{name}.g_s.{}a", 2 * (2 - s)),
                ConvGeometry::conv(c, c, 3, 1, 1),
                r.conv1_w.clone(),
                r.conv1_b.clone(),
                leaky(),
            ),
            second: layer(
                format!("{name}.g_s.{}b", 2 * (2 - s)),
                ConvGeometry::conv(c, c, 1, 1, 0),
                conv2_w,
                conv2_b,
                Activation::None,
            ),
        });
        // the last stage lands in pixel units: (p - 128) = 128 * x
        let gain = if s == 0 { 128.0 } else { 1.0 };
        g_s.push(Block::Conv(layer(
            format!("{name}.g_s.{}", 2 * (2 - s) + 1),
            ConvGeometry::transposed(c, cout, 2, 2, 0),
            haar_synthesis_weights(cout, gain),
            vec![0.0; cout],
            Activation::None,
        )));
    }

    // hyper analysis: |y| of sixteen probe channels, pooled 3x3 with stride 2
    let probes: Vec<usize> = (0..16).map(|j| j * latent / 16).collect();
    let mut ha1 = vec![0.0; 32 * latent];
    for (j, &c) in probes.iter().enumerate() {
        ha1[(2 * j) * latent + c] = 1.0;
        ha1[(2 * j + 1) * latent + c] = -1.0;
    }
    // leaky(v) + leaky(-v) = (1 - 2^-s) |v|
    let abs_gain = 1.0 / (1.0 - (LEAKY_SHIFT as f32).exp2().recip());
    let mut ha2 = vec![0.0; HYPER_CHANNELS * 32 * 9];
    for g in 0..HYPER_CHANNELS {
        for ic in 4 * g..4 * g + 4 {
            for t in 0..9 {
                ha2[(g * 32 + ic) * 9 + t] = abs_gain / (2.0 * 9.0);
            }
        }
    }
    let h_a = vec![
        Block::Conv(layer(
            format!("{name}.h_a.0"),
            ConvGeometry::conv(latent, 32, 1, 1, 0),
            ha1,
            vec![0.0; 32],
            leaky(),
        )),
        Block::Conv(layer(
            format!("{name}.h_a.1"),
            ConvGeometry::conv(32, HYPER_CHANNELS, 3, 2, 1),
            ha2,
            vec![0.0; HYPER_CHANNELS],
            Activation::None,
        )),
    ];

    // hyper synthesis for scales: bilinear upsampling, then per-channel affine
    let k1 = [0.25f32, 0.75, 0.75, 0.25];
    let mut up = vec![0.0; HYPER_MID * HYPER_CHANNELS * 16];
    for o in 0..HYPER_MID {
        let g = o / 2;
        for ky in 0..4 {
            for kx in 0..4 {
                up[(o * HYPER_CHANNELS + g) * 16 + ky * 4 + kx] = k1[ky] * k1[kx];
            }
        }
    }
    let mut sig = vec![0.0; latent * HYPER_MID * 9];
    let mut sig_b = vec![0.0; latent];
    for c in 0..latent {
        let g = (c * 16 / latent) / 2;
        for ic in [2 * g, 2 * g + 1] {
            sig[(c * HYPER_MID + ic) * 9 + 4] = 0.6;
        }
        sig_b[c] = 0.25 + 0.05 * rng.random::<f32>();
    }
    let h_sigma = vec![
        Block::Conv(layer(
            format!("{name}.h_sigma.0"),
            ConvGeometry::transposed(HYPER_CHANNELS, HYPER_MID, 4, 2, 1),
            up,
            vec![0.0; HYPER_MID],
            leaky(),
        )),
        Block::Conv(layer(
            format!("{name}.h_sigma.1"),
            ConvGeometry::conv(HYPER_MID, latent, 3, 1, 1),
            sig,
            sig_b,
            Activation::None,
        )),
    ];

    // hyper synthesis for means: small random weights
    let mut mu0 = normal_vec(rng, HYPER_MID * HYPER_CHANNELS * 16, 0.02);
    let mut mu1 = normal_vec(rng, latent * HYPER_MID * 9, 0.005);
    if adversarial {
        let row: Vec<f32> = mu0[..HYPER_CHANNELS * 16].to_vec();
        mu0[(HYPER_MID - 1) * HYPER_CHANNELS * 16..].copy_from_slice(&row);
        for c in 0..latent {
            mu1[(c * HYPER_MID) * 9 + 4] += ADVERSARIAL_HMU;
            mu1[(c * HYPER_MID + HYPER_MID - 1) * 9 + 4] -= ADVERSARIAL_HMU;
        }
    }
    let h_mu = vec![
        Block::Conv(layer(
            format!("{name}.h_mu.0"),
            ConvGeometry::transposed(HYPER_CHANNELS, HYPER_MID, 4, 2, 1),
            mu0,
            vec![0.0; HYPER_MID],
            leaky(),
        )),
        Block::Conv(layer(
            format!("{name}.h_mu.1"),
            ConvGeometry::conv(HYPER_MID, latent, 3, 1, 1),
            mu1,
            vec![0.0; latent],
            Activation::None,
        )),
    ];

    let mut rate_points: Vec<RatePoint> = BASE_GAINS
        .iter()
        .map(|&base| {
            let gain: Vec<f32> = (0..latent)
                .map(|_| base * (1.0 + 0.1 * rng.random_range(-1.0f32..=1.0)))
                .collect();
            let inv = gain.iter().map(|g| 1.0 / g).collect();
            RatePoint::new(gain, inv, false).expect("positive gains")
        })
        .collect();
    let last = rate_points[3].gain.clone();
    let gain: Vec<f32> = last.iter().map(|g| g * DERIVED_GAIN_FACTOR).collect();
    let inv = gain.iter().map(|g| 1.0 / g).collect();
    rate_points.push(RatePoint::new(gain, inv, true).expect("positive gains"));

    Branch {
        name: name.into(),
        in_channels,
        subsampling,
        g_a: Subnet::new(g_a),
        h_a: Subnet::new(h_a),
        h_mu: Subnet::new(h_mu),
        h_sigma: Subnet::new(h_sigma),
        g_s: Subnet::new(g_s),
        rate_points,
    }
}

/// Builds the float fixture model for `opts`; identical options give identical bytes.
pub fn make_fixture_model(opts: FixtureOptions) -> Result<ModelGraph> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let y = branch(&mut rng, "y", 1, 1, opts.adversarial);
    let uv = branch(&mut rng, "uv", 2, 2, opts.adversarial);
    let model = ModelGraph {
        provenance: Provenance {
            generator: "detlic make-fixture".into(),
            prng: Some("chacha8".into()),
            seed: Some(opts.seed),
            note: opts.adversarial.then(|| "adversarial".to_string()),
        },
        leaky_shift: LEAKY_SHIFT,
        branches: vec![y, uv],
        entropy: EntropyTables::build()?,
    };
    model.validate()?;
    Ok(model)
}
