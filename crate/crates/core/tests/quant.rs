use detlic_core::codec::*;
use detlic_core::image::synthetic_image;
use detlic_core::quant::*;
use detlic_core::tensor::{ActSpec, Activation, Backend, ConvGeometry, FloatConv};
use detlic_core::Error;

fn conv1x1(name: &str, cin: usize, cout: usize, w: f32, b: f32) -> Block {
    let g = ConvGeometry::conv(cin, cout, 1, 1, 0);
    Block::Conv(Layer::float(
        name,
        FloatConv::new(g, vec![w; cin * cout], vec![b; cout]).unwrap(),
        Activation::None,
    ))
}

/// Every subnet is a single 1x1 convolution. `y = 2 x`, `|mu| <= 0.9`,
/// constant `sigma = sigma_bias`, and `g_s` maps the latent back to pixels.
fn toy_model(sigma_w: f32, sigma_bias: f32) -> ModelGraph {
    let branch = |name: &str, cin: usize, sub: usize| {
        let rps = [1.0, 2.0, 4.0, 8.0]
            .iter()
            .map(|&g| RatePoint::new(vec![g; 4], vec![1.0 / g; 4], false).unwrap())
            .chain([RatePoint::new(vec![12.0; 4], vec![1.0 / 12.0; 4], true).unwrap()])
            .collect();
        Branch {
            name: name.into(),
            in_channels: cin,
            subsampling: sub,
            g_a: Subnet::new(vec![conv1x1("g_a", cin, 4, 2.0 / cin as f32, 0.0)]),
            h_a: Subnet::new(vec![conv1x1("h_a", 4, 2, 0.5, 0.0)]),
            h_mu: Subnet::new(vec![conv1x1("h_mu", 2, 4, 0.9 / 510.0, 0.0)]),
            h_sigma: Subnet::new(vec![conv1x1("h_sigma", 2, 4, sigma_w, sigma_bias)]),
            g_s: Subnet::new(vec![conv1x1("g_s", 4, cin, 16.0, 0.0)]),
            rate_points: rps,
        }
    };
    let m = ModelGraph {
        provenance: Provenance {
            generator: "test".into(),
            prng: None,
            seed: None,
            note: None,
        },
        leaky_shift: 3,
        branches: vec![branch("y", 1, 1), branch("uv", 2, 2)],
        entropy: EntropyTables::build().unwrap(),
    };
    m.validate().unwrap();
    m
}

fn calib(sizes: &[(usize, usize)]) -> CalibrationSet {
    CalibrationSet::new(
        sizes
            .iter()
            .enumerate()
            .map(|(i, &(w, h))| synthetic_image(w, h, 100 + i as u64).unwrap())
            .collect(),
    )
    .unwrap()
}

fn full_grid() -> Vec<ActSpec> {
    QuantConfig::new(WeightBits::Int16, WeightBits::Int16).grid().unwrap()
}

/// Scores every candidate through a full re-evaluation of the model and
/// picks the minimum with the documented tie-break.
fn brute_force(cal: &Calibrator, model: &ModelGraph, kind: SubnetKind, in_spec: ActSpec, bits: WeightBits) -> (ActSpec, f64) {
    let layer = model.branches[0].subnet(kind).layer(0);
    let conv = layer.as_float().unwrap();
    let mut best: Option<(ActSpec, f64)> = None;
    for spec in full_grid() {
        let Ok(q) = quantize_layer(conv, bits, in_spec, spec, layer.activation, "t") else {
            continue;
        };
        let mut m = model.clone();
        m.branches[0].subnet_mut(kind).layer_mut(0).params = LayerParams::Int(q);
        let s = cal.score(&m).map_or(f64::INFINITY, |s| s.mixed);
        let take = match best {
            None => true,
            Some((b, bs)) => s < bs || (s == bs && (spec.clip(), spec.scale_exp()) > (b.clip(), b.scale_exp())),
        };
        if take {
            best = Some((spec, s));
        }
    }
    best.unwrap()
}

#[test]
fn layer_search_matches_brute_force() {
    let anchor = toy_model(0.01, 2.0);
    let cal = Calibrator::new(&anchor, calib(&[(16, 16), (24, 12)])).unwrap();
    for (kind, bits) in [(SubnetKind::HMu, WeightBits::Int16), (SubnetKind::HSigma, WeightBits::Int8)] {
        let target = LayerTarget {
            branch: 0,
            kind,
            layer: 0,
        };
        let got = cal.calibrate_layer(&anchor, target, HYPER_SPEC, bits, &full_grid()).unwrap();
        let want = brute_force(&cal, &anchor, kind, HYPER_SPEC, bits);
        assert_eq!(got.0, want.0, "{kind}");
        assert!((got.1 - want.1).abs() < 1e-12, "{kind}: {} vs {}", got.1, want.1);
    }
}

#[test]
fn chosen_mean_format_covers_the_activation_range() {
    let anchor = toy_model(0.01, 2.0);
    let target = LayerTarget {
        branch: 0,
        kind: SubnetKind::HMu,
        layer: 0,
    };
    let spec = calibrate_activation_spec(
        &anchor,
        &anchor,
        target,
        HYPER_SPEC,
        WeightBits::Int16,
        &full_grid(),
        calib(&[(16, 16)]),
    )
    .unwrap();
    assert!(spec.max_real() >= 0.9, "{spec} truncates |mu| <= 0.9");
}

#[test]
fn constant_activations_tie_to_the_widest_format() {
    // sigma = 0 everywhere whatever the format, so every candidate scores the same
    let anchor = toy_model(0.0, 0.0);
    let cal = Calibrator::new(&anchor, calib(&[(16, 16)])).unwrap();
    let target = LayerTarget {
        branch: 0,
        kind: SubnetKind::HSigma,
        layer: 0,
    };
    let (spec, _) = cal
        .calibrate_layer(&anchor, target, HYPER_SPEC, WeightBits::Int8, &full_grid())
        .unwrap();
    assert_eq!(spec, ActSpec::new(15, 32767).unwrap());
}

#[test]
fn fixed_clipping_never_beats_flexible_on_one_layer() {
    let anchor = toy_model(0.01, 2.0);
    let cal = Calibrator::new(&anchor, calib(&[(16, 16), (20, 12)])).unwrap();
    let mut cfg = QuantConfig::new(WeightBits::Int16, WeightBits::Int16);
    let flexible = cfg.grid().unwrap();
    cfg.fixed_clip_mode = true;
    let fixed = cfg.grid().unwrap();
    for kind in [SubnetKind::HSigma, SubnetKind::HMu] {
        let target = LayerTarget {
            branch: 0,
            kind,
            layer: 0,
        };
        let f = cal.calibrate_layer(&anchor, target, HYPER_SPEC, WeightBits::Int16, &flexible).unwrap();
        let x = cal.calibrate_layer(&anchor, target, HYPER_SPEC, WeightBits::Int16, &fixed).unwrap();
        assert!(f.1 <= x.1, "{kind}: {} > {}", f.1, x.1);
        assert_eq!(x.0.clip(), 32767);
    }
}

#[test]
fn pipeline_steps_run_in_order_and_are_deterministic() {
    let anchor = toy_model(0.01, 2.0);
    let set = calib(&[(16, 16), (18, 14)]);
    let cfg = QuantConfig::new(WeightBits::Int16, WeightBits::Int16);
    let out = quantize_decoder_pipeline(&anchor, set.clone(), &cfg).unwrap();
    let kinds: Vec<SubnetKind> = out.steps.iter().map(|s| s.report.subnet).collect();
    assert_eq!(kinds, [SubnetKind::HSigma, SubnetKind::HMu, SubnetKind::GS]);
    let labels: Vec<&str> = out.steps.iter().map(|s| s.report.precision.as_str()).collect();
    assert_eq!(labels, ["(int8,-,-)", "(int8,int16,-)", "(int8,int16,int16)"]);

    // each step starts from the previous one
    for w in out.steps.windows(2) {
        for (a, b) in w[0].model.branches.iter().zip(&w[1].model.branches) {
            assert_eq!(a.h_sigma, b.h_sigma);
            assert_eq!(a.g_a, b.g_a);
            assert_eq!(a.h_a, b.h_a);
        }
    }
    let q = out.model();
    assert!(q.is_fully_quantized());
    for b in &q.branches {
        assert!(b.g_a.is_float() && b.h_a.is_float());
    }
    check_certificates(q).unwrap();

    let again = quantize_decoder_pipeline(&anchor, set, &cfg).unwrap();
    assert_eq!(again.model(), q);
    assert_eq!(again.reports(), out.reports());

    let w8 = QuantConfig::new(WeightBits::Int8, WeightBits::Int8);
    let out8 = quantize_decoder_pipeline(&anchor, calib(&[(16, 16)]), &w8).unwrap();
    assert_eq!(out8.steps[2].report.precision, "(int8,int8,int8)");

    let img = synthetic_image(30, 22, 5).unwrap();
    for rp in 0..5 {
        let e = encode(&img, q, rp, Backend::Permuted).unwrap();
        for b in Backend::ALL {
            assert_eq!(decode(&e.bitstream, q, b).unwrap(), e.reconstruction);
        }
    }
}

#[test]
fn pipeline_rejects_bad_inputs() {
    let anchor = toy_model(0.01, 2.0);
    assert!(CalibrationSet::new(Vec::new()).is_err());
    let cfg = QuantConfig::new(WeightBits::Int16, WeightBits::Int16);
    let cal = Calibrator::new(&anchor, calib(&[(16, 16)])).unwrap();
    let partial = quantize_until(&cal, &anchor, &cfg, SubnetKind::HSigma).unwrap();
    assert_eq!(partial.steps.len(), 1);
    // already quantized decoder
    assert!(matches!(
        quantize_with(&cal, partial.model(), &cfg),
        Err(Error::QuantConfig(_))
    ));
    assert!(quantize_until(&cal, &anchor, &cfg, SubnetKind::GA).is_err());
    let mut empty = cfg.clone();
    empty.clips.clear();
    assert!(quantize_with(&cal, &anchor, &empty).is_err());
}

fn small_grid() -> QuantConfig {
    let mut cfg = QuantConfig::new(WeightBits::Int16, WeightBits::Int16);
    cfg.scale_exps = vec![4, 8, 12];
    cfg.clips = vec![32767, 4095];
    cfg
}

#[test]
fn fixture_pipeline_is_bit_exact() {
    let m = make_fixture_model(FixtureOptions {
        seed: 5,
        adversarial: false,
    })
    .unwrap();
    let out = quantize_decoder_pipeline(&m, calib(&[(64, 64)]), &small_grid()).unwrap();
    let q = out.model();
    assert!(q.is_fully_quantized());
    check_certificates(q).unwrap();
    let img = synthetic_image(80, 50, 1).unwrap();
    let e = encode(&img, q, 4, Backend::Tiled).unwrap();
    for b in Backend::ALL {
        assert_eq!(decode(&e.bitstream, q, b).unwrap(), e.reconstruction);
    }

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("q.json");
    q.save(&p).unwrap();
    let loaded = ModelGraph::load(&p).unwrap();
    assert_eq!(&loaded, q);
    assert_eq!(decode(&e.bitstream, &loaded, Backend::Reference).unwrap(), e.reconstruction);
}

#[test]
fn adversarial_synthesis_cannot_be_quantized() {
    let m = make_fixture_model(FixtureOptions {
        seed: 5,
        adversarial: true,
    })
    .unwrap();
    let cal = Calibrator::new(&m, calib(&[(32, 32)])).unwrap();
    let partial = quantize_until(&cal, &m, &small_grid(), SubnetKind::HMu).unwrap();
    assert_eq!(partial.model().precision_label(), [Some(8), Some(16), None]);
    let err = quantize_with(&cal, &m, &small_grid()).unwrap_err();
    assert!(matches!(err, Error::Infeasible { .. }), "{err}");
}
