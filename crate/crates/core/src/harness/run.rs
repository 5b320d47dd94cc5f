//! One runner per command-line mode. Each reads a validated [`RunConfig`]
//! and writes its outputs under `output`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::{display_name, Mode, RunConfig};
use super::eval::{bd_summary, rd_curve, BdSummary, CurvePoint};
use super::verify::{verify, VerifyReport};
use super::{csv_with_config, write_bytes};
use crate::codec::{decode, encode, format_precision, make_fixture_model, Encoded, FixtureOptions, ModelGraph, SubnetKind};
use crate::error::{Error, Result};
use crate::image::{load_image, save_image};
use crate::quant::{quantize_until, CalibrationSet, Calibrator, StepReport};
use crate::tensor::Backend;

/// One row of the per-step table: weight widths and BD-rates against the
/// float model, measured with the range coder on the calibration images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuantizeRow {
    pub step: usize,
    pub h_sigma: String,
    pub h_mu: String,
    pub g_s: String,
    pub ms_ssim: f64,
    pub y_psnr: f64,
    pub u_psnr: f64,
    pub v_psnr: f64,
    pub yuv_psnr: f64,
    pub mixed: f64,
    /// Mixed BD-rate the calibration search saw (estimated rates).
    pub calib_mixed: f64,
    pub model_file: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub precision: String,
    pub ms_ssim: f64,
    pub y_psnr: f64,
    pub u_psnr: f64,
    pub v_psnr: f64,
    pub yuv_psnr: f64,
    pub mixed: f64,
}

#[derive(Serialize)]
struct QuantizeJson<'a> {
    config: &'a RunConfig,
    rows: &'a [QuantizeRow],
    steps: Vec<&'a StepReport>,
}

#[derive(Serialize)]
struct VerifyJson<'a> {
    config: &'a RunConfig,
    failures: usize,
    report: &'a VerifyReport,
}

fn primary_backend(config: &RunConfig) -> Backend {
    config.backends.first().copied().unwrap_or_default()
}

fn load_models(paths: &[impl AsRef<Path>]) -> Result<Vec<(String, ModelGraph)>> {
    paths
        .iter()
        .map(|p| Ok((display_name(p.as_ref()), ModelGraph::load(p.as_ref())?)))
        .collect()
}

fn json_bytes<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(v)?;
    out.push(b'\n');
    Ok(out)
}

fn bits_label(bits: Option<u32>) -> String {
    bits.map_or_else(|| "-".to_string(), |b| format!("int{b}"))
}

/// Quantizes the float `model` step by step, saving the model after every
/// step as `quant_<subnet>.json` next to `quantize.csv` and `quantize.json`.
pub fn run_quantize(config: &RunConfig) -> Result<Vec<QuantizeRow>> {
    config.validate(Mode::Quantize)?;
    let out_dir = config.output_dir()?;
    let model = ModelGraph::load(config.model.as_deref().expect("validated"))?;
    let images = config.load_images()?;
    let calib = CalibrationSet::new(images.iter().map(|(_, img)| img.clone()).collect())?;
    let cal = Calibrator::new(&model, calib)?;
    let pipeline = quantize_until(&cal, &model, &config.quant, config.until.unwrap_or(SubnetKind::GS))?;

    let rate_points = config.rate_points_for(&model)?;
    let anchor_curve = rd_curve(&model, &images, &rate_points, Backend::Reference)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut rows = Vec::with_capacity(pipeline.steps.len());
    for (i, step) in pipeline.steps.iter().enumerate() {
        let file = format!("quant_{}.json", step.report.subnet);
        step.model.save(&out_dir.join(&file))?;
        let curve = rd_curve(&step.model, &images, &rate_points, Backend::Reference)?;
        let bd = bd_summary(&anchor_curve, &curve)?;
        let [hs, hm, gs] = step.model.precision_label();
        rows.push(QuantizeRow {
            step: i + 1,
            h_sigma: bits_label(hs),
            h_mu: bits_label(hm),
            g_s: bits_label(gs),
            ms_ssim: bd.ms_ssim,
            y_psnr: bd.y_psnr,
            u_psnr: bd.u_psnr,
            v_psnr: bd.v_psnr,
            yuv_psnr: bd.yuv_psnr,
            mixed: bd.mixed,
            calib_mixed: step.report.scores.mixed,
            model_file: file,
        });
    }
    write_bytes(&out_dir.join("quantize.csv"), &csv_with_config(config, &rows)?)?;
    let doc = QuantizeJson {
        config,
        rows: &rows,
        steps: pipeline.reports(),
    };
    write_bytes(&out_dir.join("quantize.json"), &json_bytes(&doc)?)?;
    Ok(rows)
}

/// Encodes the single input image with the first configured backend at the
/// first configured rate point (0 by default) and writes the bitstream.
pub fn run_encode(config: &RunConfig) -> Result<Encoded> {
    config.validate(Mode::Encode)?;
    let model = ModelGraph::load(config.model.as_deref().expect("validated"))?;
    let image = load_image(&config.images[0])?;
    let rp = config.rate_points_for(&model)?[0];
    let enc = encode(&image, &model, rp, primary_backend(config))?;
    write_bytes(config.output_dir()?, &enc.bitstream)?;
    Ok(enc)
}

/// Decodes `bitstream` with the first configured backend and writes the
/// image; the output extension picks `.ppm` or `.y4m`.
pub fn run_decode(config: &RunConfig) -> Result<()> {
    config.validate(Mode::Decode)?;
    let model = ModelGraph::load(config.model.as_deref().expect("validated"))?;
    let path = config.bitstream.as_deref().expect("validated");
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let image = decode(&bytes, &model, primary_backend(config))?;
    let out = config.output_dir()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_image(out, &image)
}

/// Runs the determinism grid over every model. Writes `verify.csv` (the
/// grid) and `verify.json` (every cell); fails with
/// [`Error::VerifyFailed`] when a fully quantized model mismatches.
pub fn run_verify(config: &RunConfig) -> Result<VerifyReport> {
    config.validate(Mode::Verify)?;
    let out_dir = config.output_dir()?;
    let models = load_models(&config.model_paths())?;
    let images = config.load_images()?;
    let first = &models[0].1;
    let rate_points = config.rate_points_for(first)?;
    for (name, m) in &models[1..] {
        if m.rate_point_count() != first.rate_point_count() {
            return Err(Error::Config(format!("{name} has a different number of rate points")));
        }
    }
    let report = verify(&models, &images, &config.backends, &rate_points)?;
    let mut csv = format!("# config={}\n", config.to_json_line()).into_bytes();
    csv.extend(report.grid_csv()?);
    write_bytes(&out_dir.join("verify.csv"), &csv)?;
    let failures = report.failures();
    let doc = VerifyJson {
        config,
        failures,
        report: &report,
    };
    write_bytes(&out_dir.join("verify.json"), &json_bytes(&doc)?)?;
    if failures > 0 {
        return Err(Error::VerifyFailed { failures });
    }
    Ok(report)
}

fn curve_file(path: &Path) -> String {
    let stem = path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    format!("curve_{stem}.csv")
}

/// Rate-distortion curves of the anchor and every model, and BD-rates
/// against the anchor in `eval.csv`.
pub fn run_eval(config: &RunConfig) -> Result<Vec<EvalRow>> {
    config.validate(Mode::Eval)?;
    let out_dir = config.output_dir()?;
    let backend = primary_backend(config);
    let anchor_path = config.anchor.as_deref().expect("validated");
    let anchor = ModelGraph::load(anchor_path)?;
    let images = config.load_images()?;
    let rate_points = config.rate_points_for(&anchor)?;
    let anchor_curve = rd_curve(&anchor, &images, &rate_points, backend)?;
    write_bytes(
        &out_dir.join("curve_anchor.csv"),
        &csv_with_config(config, &anchor_curve)?,
    )?;
    let mut rows = Vec::new();
    for path in config.model_paths() {
        let model = ModelGraph::load(&path)?;
        if model.rate_point_count() != anchor.rate_point_count() {
            return Err(Error::Config(format!(
                "{} has {} rate points, the anchor {}",
                path.display(),
                model.rate_point_count(),
                anchor.rate_point_count()
            )));
        }
        let curve = rd_curve(&model, &images, &rate_points, backend)?;
        write_bytes(&out_dir.join(curve_file(&path)), &csv_with_config(config, &curve)?)?;
        let bd = bd_summary(&anchor_curve, &curve)?;
        rows.push(EvalRow {
            model: display_name(&path),
            precision: format_precision(model.precision_label()),
            ms_ssim: bd.ms_ssim,
            y_psnr: bd.y_psnr,
            u_psnr: bd.u_psnr,
            v_psnr: bd.v_psnr,
            yuv_psnr: bd.yuv_psnr,
            mixed: bd.mixed,
        });
    }
    write_bytes(&out_dir.join("eval.csv"), &csv_with_config(config, &rows)?)?;
    Ok(rows)
}

/// Reads a curve CSV as written by `eval`; `#` lines are skipped.
pub fn read_curve(path: &Path) -> Result<Vec<CurvePoint>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .from_reader(file)
        .deserialize()
        .map(|r| r.map_err(Error::from))
        .collect()
}

/// BD-rates of the curve in `model` against the curve in `anchor`; written
/// to `bdrate.csv` when an output directory is set.
pub fn run_bdrate(config: &RunConfig) -> Result<BdSummary> {
    config.validate(Mode::Bdrate)?;
    let anchor = read_curve(config.anchor.as_deref().expect("validated"))?;
    let test = read_curve(config.model.as_deref().expect("validated"))?;
    let bd = bd_summary(&anchor, &test)?;
    if let Some(dir) = &config.output {
        write_bytes(&dir.join("bdrate.csv"), &csv_with_config(config, &[bd])?)?;
    }
    Ok(bd)
}

/// Writes the seeded float fixture model to `output` (manifest path).
pub fn run_make_fixture(config: &RunConfig) -> Result<ModelGraph> {
    config.validate(Mode::MakeFixture)?;
    let model = make_fixture_model(FixtureOptions {
        seed: config.seed,
        adversarial: config.adversarial,
    })?;
    let out = config.output_dir()?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    model.save(out)?;
    Ok(model)
}
