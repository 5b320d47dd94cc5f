use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use detlic_core::codec::SubnetKind;
use detlic_core::harness::{self, exit_code, Mode, RunConfig, VerifyReport};
use detlic_core::quant::WeightBits;
use detlic_core::tensor::Backend;
use detlic_core::{Error, Result};

/// Deterministic fixed-point decoding for a hyperprior image codec.
///
/// Every subcommand reads an optional JSON config; flags override its fields.
/// Set DETLIC_THREADS to bound the worker pool.
#[derive(Parser, Debug)]
#[command(name = "detlic", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Quantize h_sigma, h_mu and g_s of a float model step by step.
    Quantize(Opts),
    /// Encode one image to a bitstream.
    Encode(Opts),
    /// Decode a bitstream to a .ppm or .y4m image.
    Decode(Opts),
    /// Rate-distortion curves and BD-rates of models against an anchor.
    Eval(Opts),
    /// Encode on one backend and decode on every other; exits 3 on mismatch.
    Verify(Opts),
    /// BD-rates between two curve CSV files written by eval.
    Bdrate(Opts),
    /// Write the seeded float fixture model.
    MakeFixture(Opts),
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// JSON run configuration.
    #[arg(long, short = 'c')]
    config: Option<PathBuf>,
    /// Model manifest (quantize, encode, decode, eval, verify) or test curve (bdrate).
    #[arg(long, short = 'm')]
    model: Option<PathBuf>,
    /// Additional model manifests for eval and verify.
    #[arg(long = "models", num_args = 1..)]
    models: Vec<PathBuf>,
    /// Anchor model (eval) or anchor curve (bdrate).
    #[arg(long)]
    anchor: Option<PathBuf>,
    /// Image files or directories of .ppm / .y4m files.
    #[arg(long, short = 'i', num_args = 1..)]
    images: Vec<PathBuf>,
    /// Bitstream to decode.
    #[arg(long, short = 'b')]
    bitstream: Option<PathBuf>,
    /// Output directory, or output file for encode, decode and make-fixture.
    #[arg(long, short = 'o')]
    output: Option<PathBuf>,
    /// Backends; the first one encodes or decodes in single-backend modes.
    #[arg(long = "backend", value_parser = parse_backend, num_args = 1..)]
    backends: Vec<Backend>,
    /// Rate point indices; default is all.
    #[arg(long = "rate-point", num_args = 1..)]
    rate_points: Vec<usize>,
    #[arg(long, value_parser = parse_bits)]
    h_mu_bits: Option<WeightBits>,
    #[arg(long, value_parser = parse_bits)]
    g_s_bits: Option<WeightBits>,
    /// Weight width of both h_mu and g_s.
    #[arg(long, short = 'w', value_parser = parse_bits, conflicts_with_all = ["h_mu_bits", "g_s_bits"])]
    weight_bits: Option<WeightBits>,
    /// Search the activation scale only, clipping at 2^15 - 1.
    #[arg(long)]
    fixed_clip: bool,
    /// Stop quantizing after this subnet (h_sigma, h_mu or g_s).
    #[arg(long, value_parser = parse_subnet)]
    until: Option<SubnetKind>,
    /// Fixture seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Build the fixture with order-sensitive float layers.
    #[arg(long)]
    adversarial: bool,
}

fn parse_backend(s: &str) -> std::result::Result<Backend, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_bits(s: &str) -> std::result::Result<WeightBits, String> {
    match s {
        "8" | "int8" => Ok(WeightBits::Int8),
        "16" | "int16" => Ok(WeightBits::Int16),
        _ => Err(format!("'{s}' is not one of 8, 16, int8, int16")),
    }
}

fn parse_subnet(s: &str) -> std::result::Result<SubnetKind, String> {
    SubnetKind::DECODER
        .into_iter()
        .find(|k| k.name() == s)
        .ok_or_else(|| format!("'{s}' is not one of h_sigma, h_mu, g_s"))
}

impl Opts {
    fn resolve(self, mode: Mode) -> Result<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        c.mode = Some(mode);
        if self.model.is_some() {
            c.model = self.model;
        }
        if !self.models.is_empty() {
            c.models = self.models;
        }
        if self.anchor.is_some() {
            c.anchor = self.anchor;
        }
        if !self.images.is_empty() {
            c.images = self.images;
        }
        if self.bitstream.is_some() {
            c.bitstream = self.bitstream;
        }
        if self.output.is_some() {
            c.output = self.output;
        }
        if !self.backends.is_empty() {
            c.backends = self.backends;
        }
        if !self.rate_points.is_empty() {
            c.rate_points = self.rate_points;
        }
        if let Some(b) = self.weight_bits {
            c.quant.h_mu_bits = b;
            c.quant.g_s_bits = b;
        }
        if let Some(b) = self.h_mu_bits {
            c.quant.h_mu_bits = b;
        }
        if let Some(b) = self.g_s_bits {
            c.quant.g_s_bits = b;
        }
        if self.fixed_clip {
            c.quant.fixed_clip_mode = true;
        }
        if self.until.is_some() {
            c.until = self.until;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if self.adversarial {
            c.adversarial = true;
        }
        Ok(c)
    }
}

fn print_grid(report: &VerifyReport) {
    for row in &report.grid {
        let cells: Vec<String> = row
            .pairs
            .iter()
            .zip(&row.mean_mse)
            .map(|((a, b), m)| format!("{a}->{b}={m}"))
            .collect();
        println!("{} {} {}", row.model, row.precision, cells.join(" "));
    }
}

fn run(cli: Cli) -> Result<()> {
    let threads = harness::init_threads()?;
    log::debug!("{threads} worker threads");
    let (mode, opts) = match cli.command {
        Command::Quantize(o) => (Mode::Quantize, o),
        Command::Encode(o) => (Mode::Encode, o),
        Command::Decode(o) => (Mode::Decode, o),
        Command::Eval(o) => (Mode::Eval, o),
        Command::Verify(o) => (Mode::Verify, o),
        Command::Bdrate(o) => (Mode::Bdrate, o),
        Command::MakeFixture(o) => (Mode::MakeFixture, o),
    };
    let config = opts.resolve(mode)?;
    log::info!("config {}", config.to_json_line());
    match mode {
        Mode::Quantize => {
            for r in harness::run_quantize(&config)? {
                println!(
                    "({},{},{}) ms_ssim={:.3} yuv_psnr={:.3} mixed={:.3} -> {}",
                    r.h_sigma, r.h_mu, r.g_s, r.ms_ssim, r.yuv_psnr, r.mixed, r.model_file
                );
            }
        }
        Mode::Encode => {
            let e = harness::run_encode(&config)?;
            println!("{} bytes, {} payload bits", e.bitstream.len(), e.rate_bits);
        }
        Mode::Decode => harness::run_decode(&config)?,
        Mode::Eval => {
            for r in harness::run_eval(&config)? {
                println!(
                    "{} {} ms_ssim={:.3} yuv_psnr={:.3} mixed={:.3}",
                    r.model, r.precision, r.ms_ssim, r.yuv_psnr, r.mixed
                );
            }
        }
        Mode::Verify => match harness::run_verify(&config) {
            Ok(report) => print_grid(&report),
            Err(e @ Error::VerifyFailed { .. }) => {
                // the report is on disk; echo the grid before failing
                if let Some(dir) = &config.output {
                    if let Ok(text) = std::fs::read_to_string(dir.join("verify.csv")) {
                        print!("{text}");
                    }
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        },
        Mode::Bdrate => {
            let bd = harness::run_bdrate(&config)?;
            println!(
                "ms_ssim={:.4} y_psnr={:.4} u_psnr={:.4} v_psnr={:.4} yuv_psnr={:.4} mixed={:.4}",
                bd.ms_ssim, bd.y_psnr, bd.u_psnr, bd.v_psnr, bd.yuv_psnr, bd.mixed
            );
        }
        Mode::MakeFixture => {
            let m = harness::run_make_fixture(&config)?;
            println!("model_id {:08x}", m.model_id());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
