use std::path::{Path, PathBuf};

use detlic_core::codec::{decode, ModelGraph};
use detlic_core::harness::*;
use detlic_core::image::{load_image, save_image, synthetic_image};
use detlic_core::quant::{QuantConfig, WeightBits};
use detlic_core::tensor::Backend;
use detlic_core::Error;

fn small_quant(bits: WeightBits) -> QuantConfig {
    let mut q = QuantConfig::new(bits, bits);
    q.scale_exps = vec![4, 8, 12];
    q.clips = vec![32767, 4095];
    q
}

fn write_images(dir: &Path, sizes: &[(usize, usize)]) -> PathBuf {
    let img_dir = dir.join("images");
    std::fs::create_dir_all(&img_dir).unwrap();
    for (i, &(w, h)) in sizes.iter().enumerate() {
        let ext = if i % 2 == 0 { "ppm" } else { "y4m" };
        save_image(&img_dir.join(format!("img{i}.{ext}")), &synthetic_image(w, h, 40 + i as u64).unwrap()).unwrap();
    }
    img_dir
}

fn fixture(dir: &Path, name: &str, seed: u64, adversarial: bool) -> PathBuf {
    let path = dir.join(name);
    run_make_fixture(&RunConfig {
        output: Some(path.clone()),
        seed,
        adversarial,
        ..RunConfig::default()
    })
    .unwrap();
    path
}

#[test]
fn fixtures_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = fixture(dir.path(), "a/m.json", 3, false);
    let b = fixture(dir.path(), "b/m.json", 3, false);
    let c = fixture(dir.path(), "c/m.json", 4, false);
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_eq!(read(&a.with_extension("bin")), read(&b.with_extension("bin")));
    assert_ne!(read(&a), read(&c));
}

#[test]
fn quantize_writes_step_rows_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture(dir.path(), "float.json", 1, false);
    let images = write_images(dir.path(), &[(64, 64)]);
    let run = |out: &str, bits: WeightBits| {
        let cfg = RunConfig {
            model: Some(model.clone()),
            images: vec![images.clone()],
            output: Some(dir.path().join(out)),
            quant: small_quant(bits),
            ..RunConfig::default()
        };
        run_quantize(&cfg).unwrap()
    };
    let rows = run("q1", WeightBits::Int16);
    let labels: Vec<[&str; 3]> = rows
        .iter()
        .map(|r| [r.h_sigma.as_str(), r.h_mu.as_str(), r.g_s.as_str()])
        .collect();
    assert_eq!(labels, [["int8", "-", "-"], ["int8", "int16", "-"], ["int8", "int16", "int16"]]);
    for r in &rows {
        assert!(r.mixed.is_finite() && r.calib_mixed.is_finite());
        assert!((r.mixed - (r.yuv_psnr + r.ms_ssim) / 2.0).abs() < 1e-12);
    }
    let q = ModelGraph::load(&dir.path().join("q1/quant_g_s.json")).unwrap();
    assert!(q.is_fully_quantized());

    let csv = std::fs::read_to_string(dir.path().join("q1/quantize.csv")).unwrap();
    assert!(csv.starts_with("# config={"));
    assert!(csv.lines().nth(1).unwrap().starts_with("step,h_sigma,h_mu,g_s,ms_ssim"));

    // the config line names the output directory, so compare from line two on
    run("q2", WeightBits::Int16);
    let body = |d: &str| {
        let t = std::fs::read_to_string(dir.path().join(d).join("quantize.csv")).unwrap();
        t.split_once('\n').unwrap().1.to_string()
    };
    assert_eq!(body("q1"), body("q2"));
    assert_eq!(
        std::fs::read(dir.path().join("q1/quant_g_s.bin")).unwrap(),
        std::fs::read(dir.path().join("q2/quant_g_s.bin")).unwrap()
    );

    let rows8 = run("q8", WeightBits::Int8);
    assert_eq!([rows8[2].h_sigma.as_str(), &rows8[2].h_mu, &rows8[2].g_s], ["int8", "int8", "int8"]);
}

#[test]
fn verify_passes_quantized_and_flags_float_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let float = fixture(dir.path(), "adv.json", 2, true);
    let images = write_images(dir.path(), &[(48, 40), (33, 47)]);
    let partial = RunConfig {
        model: Some(float.clone()),
        images: vec![images.clone()],
        output: Some(dir.path().join("q")),
        quant: small_quant(WeightBits::Int16),
        until: Some(detlic_core::codec::SubnetKind::HMu),
        ..RunConfig::default()
    };
    run_quantize(&partial).unwrap();

    let cfg = RunConfig {
        model: Some(float.clone()),
        models: vec![dir.path().join("q/quant_h_sigma.json"), dir.path().join("q/quant_h_mu.json")],
        images: vec![images.clone()],
        output: Some(dir.path().join("v")),
        rate_points: vec![0, 4],
        ..RunConfig::default()
    };
    // no model is fully quantized, so differences are reported, not fatal
    let report = run_verify(&cfg).unwrap();
    assert_eq!(report.grid.len(), 3);
    assert_eq!(report.grid[0].pairs.len(), 9);
    let float_row = &report.grid[0];
    assert!(float_row.mean_mse.iter().any(|&m| m > 0.0), "{:?}", float_row.mean_mse);
    for row in &report.grid {
        for (i, &(a, b)) in row.pairs.iter().enumerate() {
            if a == b {
                assert_eq!(row.mean_mse[i], 0.0);
                assert!(row.all_pass[i]);
            }
        }
    }
    for c in &report.cells {
        assert_eq!(c.pass, c.mse_enc_dec == 0.0 && c.decoder_hash.as_deref() == Some(c.encoder_hash.as_str()));
    }
    let grid = std::fs::read_to_string(dir.path().join("v/verify.csv")).unwrap();
    assert!(grid.lines().nth(1).unwrap().starts_with("model,precision,reference->reference"));
}

#[test]
fn verify_of_fully_quantized_model_is_all_zero() {
    let dir = tempfile::tempdir().unwrap();
    let float = fixture(dir.path(), "m.json", 6, false);
    let images = write_images(dir.path(), &[(64, 64)]);
    run_quantize(&RunConfig {
        model: Some(float),
        images: vec![images.clone()],
        output: Some(dir.path().join("q")),
        quant: small_quant(WeightBits::Int8),
        rate_points: vec![0, 1, 2, 3, 4],
        ..RunConfig::default()
    })
    .unwrap();
    let cfg = RunConfig {
        model: Some(dir.path().join("q/quant_g_s.json")),
        images: vec![write_images(&dir.path().join("more"), &[(70, 30), (17, 90), (64, 64)])],
        output: Some(dir.path().join("v")),
        ..RunConfig::default()
    };
    let report = run_verify(&cfg).unwrap();
    assert_eq!(report.failures(), 0);
    assert!(report.grid[0].fully_quantized);
    assert!(report.grid[0].mean_mse.iter().all(|&m| m == 0.0));
    assert_eq!(report.cells.len(), 3 * 5 * 9);
}

#[test]
fn encode_decode_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture(dir.path(), "m.json", 8, false);
    let images = write_images(dir.path(), &[(40, 24)]);
    let img = images.join("img0.ppm");
    let bits = dir.path().join("out/img.bit");
    let enc = run_encode(&RunConfig {
        model: Some(model.clone()),
        images: vec![img.clone()],
        output: Some(bits.clone()),
        rate_points: vec![2],
        backends: vec![Backend::Tiled],
        ..RunConfig::default()
    })
    .unwrap();
    assert_eq!(std::fs::read(&bits).unwrap(), enc.bitstream);
    let rec = dir.path().join("out/rec.y4m");
    run_decode(&RunConfig {
        model: Some(model.clone()),
        bitstream: Some(bits.clone()),
        output: Some(rec.clone()),
        backends: vec![Backend::Tiled],
        ..RunConfig::default()
    })
    .unwrap();
    assert_eq!(load_image(&rec).unwrap(), enc.reconstruction);
    let m = ModelGraph::load(&model).unwrap();
    assert_eq!(decode(&enc.bitstream, &m, Backend::Tiled).unwrap(), enc.reconstruction);
}

#[test]
fn eval_against_itself_is_zero_and_bdrate_reads_curves() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture(dir.path(), "m.json", 9, false);
    let images = write_images(dir.path(), &[(48, 48), (40, 56)]);
    let cfg = RunConfig {
        model: Some(model.clone()),
        anchor: Some(model.clone()),
        images: vec![images],
        output: Some(dir.path().join("e")),
        backends: vec![Backend::Reference],
        ..RunConfig::default()
    };
    let rows = run_eval(&cfg).unwrap();
    assert_eq!(rows.len(), 1);
    for v in [rows[0].ms_ssim, rows[0].y_psnr, rows[0].u_psnr, rows[0].v_psnr, rows[0].yuv_psnr, rows[0].mixed] {
        assert!(v.abs() < 1e-9, "{v}");
    }

    let anchor_csv = dir.path().join("e/curve_anchor.csv");
    let curve = read_curve(&anchor_csv).unwrap();
    assert_eq!(curve.len(), 5);
    let doubled: Vec<CurvePoint> = curve
        .iter()
        .map(|p| CurvePoint {
            rate_bpp: 2.0 * p.rate_bpp,
            ..*p
        })
        .collect();
    let test_csv = dir.path().join("doubled.csv");
    std::fs::write(&test_csv, csv_with_config(&cfg, &doubled).unwrap()).unwrap();
    let bd = run_bdrate(&RunConfig {
        model: Some(test_csv),
        anchor: Some(anchor_csv),
        ..RunConfig::default()
    })
    .unwrap();
    for v in [bd.ms_ssim, bd.y_psnr, bd.u_psnr, bd.v_psnr, bd.yuv_psnr, bd.mixed] {
        assert!((v - 100.0).abs() < 1e-6, "{v}");
    }
}

#[test]
fn errors_map_to_distinct_exit_codes() {
    let cfg = RunConfig::default();
    let err = run_verify(&cfg).unwrap_err();
    assert_eq!(exit_code(&err), EXIT_CONFIG);
    assert_eq!(exit_code(&Error::VerifyFailed { failures: 1 }), EXIT_VERIFY);
    let inf = Error::Infeasible {
        layer: "g_s".into(),
        channel: 0,
    };
    assert_eq!(exit_code(&inf), EXIT_INFEASIBLE);
    assert_eq!(exit_code(&Error::Desync("x")), EXIT_FAILURE);
    let codes = [EXIT_OK, EXIT_FAILURE, EXIT_CONFIG, EXIT_VERIFY, EXIT_INFEASIBLE];
    for (i, a) in codes.iter().enumerate() {
        for b in &codes[i + 1..] {
            assert_ne!(a, b);
        }
    }
}

#[test]
fn adversarial_quantize_is_infeasible() {
    let dir = tempfile::tempdir().unwrap();
    let model = fixture(dir.path(), "adv.json", 2, true);
    let images = write_images(dir.path(), &[(32, 32)]);
    let err = run_quantize(&RunConfig {
        model: Some(model),
        images: vec![images],
        output: Some(dir.path().join("q")),
        quant: small_quant(WeightBits::Int16),
        ..RunConfig::default()
    })
    .unwrap_err();
    assert_eq!(exit_code(&err), EXIT_INFEASIBLE, "{err}");
}
