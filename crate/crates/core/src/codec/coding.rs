//! Image encode / decode through a (partially) quantized model.

use super::bitstream::{write_section, Header, PlaneDims, Reader};
use super::entropy::{EntropyTables, SYMBOL_MAX, SYMBOL_MIN};
use super::gain::{apply_gain, apply_inverse_gain, apply_inverse_gain_float};
use super::model::{Branch, ModelGraph, RatePoint, Value, HYPER_SPEC, PIXEL_SPEC};
use super::range_coder::{range_decode, range_encode};
use crate::error::{Error, Result};
use crate::image::{Plane, YuvImage};
use crate::tensor::{Backend, FloatTensor, QTensor, Shape};

/// Encoder-side latents of one branch before entropy coding.
#[derive(Debug, Clone, PartialEq)]
pub struct Analysis {
    pub y_gained: FloatTensor,
    pub z_hat: QTensor,
}

/// Entropy parameters derived from the hyper-latent.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperOutput {
    pub bins: Vec<usize>,
    pub mu: Value,
}

fn saturate(v: f64) -> i32 {
    // NaN saturates to zero
    (v.round() as i32).clamp(SYMBOL_MIN, SYMBOL_MAX)
}

/// Splits a padded image into normalised branch inputs `(p - 128) / 128`.
pub fn branch_inputs(image: &YuvImage, model: &ModelGraph) -> Result<Vec<FloatTensor>> {
    let planes = image.planes();
    let mut next = 0;
    let mut out = Vec::with_capacity(model.branches.len());
    for b in &model.branches {
        let group = planes
            .get(next..next + b.in_channels)
            .ok_or_else(|| Error::Model("branches consume more than three planes".into()))?;
        next += b.in_channels;
        let (w, h) = (group[0].width, group[0].height);
        if group.iter().any(|p| (p.width, p.height) != (w, h))
            || (w * b.subsampling, h * b.subsampling) != (image.width(), image.height())
        {
            return Err(Error::Model(format!(
                "branch {} does not match the plane layout",
                b.name
            )));
        }
        let data = group
            .iter()
            .flat_map(|p| p.data.iter().map(|&v| (v as f32 - 128.0) / 128.0))
            .collect();
        out.push(FloatTensor::new(Shape::new(b.in_channels, h, w), data)?);
    }
    if next != 3 {
        return Err(Error::Model("branches must consume exactly three planes".into()));
    }
    Ok(out)
}

/// `g_a`, gain, `h_a` and hyper-latent rounding; always floating point.
pub fn analyze(branch: &Branch, x: &FloatTensor, rp: &RatePoint, backend: Backend) -> Result<Analysis> {
    let y = branch.g_a.forward(Value::Float(x.clone()), backend)?.to_float();
    let y_gained = apply_gain(&y, rp)?;
    let z = branch.h_a.forward(Value::Float(y_gained.clone()), backend)?.to_float();
    let data = z.data().iter().map(|&v| saturate(v as f64)).collect();
    let z_hat = QTensor::new(z.shape(), data, HYPER_SPEC)?;
    Ok(Analysis { y_gained, z_hat })
}

/// Runs `h_sigma` and `h_mu` on the decoded hyper-latent.
pub fn hyper_decode(
    branch: &Branch,
    z_hat: &QTensor,
    tables: &EntropyTables,
    backend: Backend,
) -> Result<HyperOutput> {
    let input = Value::Int(z_hat.clone());
    let sigma = branch.h_sigma.forward(input.clone(), backend)?;
    let mu = branch.h_mu.forward(input, backend)?;
    if sigma.shape() != mu.shape() {
        return Err(Error::Shape(format!("sigma {} vs mu {}", sigma.shape(), mu.shape())));
    }
    Ok(HyperOutput {
        bins: scale_bins(&sigma, tables),
        mu,
    })
}

/// Entropy-table index of every latent element.
pub fn scale_bins(sigma: &Value, tables: &EntropyTables) -> Vec<usize> {
    match sigma {
        Value::Int(t) => {
            let a = t.spec().scale_exp();
            t.data().iter().map(|&v| tables.bin_fixed(v, a)).collect()
        }
        Value::Float(t) => t.data().iter().map(|&v| tables.bin_float(v)).collect(),
    }
}

/// `r = sat(round(y_gained - mu))`.
pub fn residuals(y_gained: &FloatTensor, mu: &Value) -> Result<Vec<i32>> {
    if y_gained.shape() != mu.shape() {
        return Err(Error::Shape(format!("latent {} vs mu {}", y_gained.shape(), mu.shape())));
    }
    Ok(match mu {
        Value::Int(m) => {
            let scale = f64::from(1u32 << m.spec().scale_exp());
            y_gained
                .data()
                .iter()
                .zip(m.data())
                .map(|(&y, &q)| saturate(y as f64 - q as f64 / scale))
                .collect()
        }
        Value::Float(m) => y_gained
            .data()
            .iter()
            .zip(m.data())
            .map(|(&y, &mu)| saturate(y as f64 - mu as f64))
            .collect(),
    })
}

/// `y_hat = clip(r * 2^a + mu_q)` in integers, or `r + mu` in floating point.
pub fn latent_from_residuals(r: &[i32], mu: &Value) -> Result<Value> {
    if r.len() != mu.shape().len() {
        return Err(Error::Shape(format!("{} residuals for {}", r.len(), mu.shape())));
    }
    Ok(match mu {
        Value::Int(m) => {
            let spec = m.spec();
            let q = spec.clip();
            let data = r
                .iter()
                .zip(m.data())
                .map(|(&r, &mu)| ((r << spec.scale_exp()) + mu).clamp(-q, q))
                .collect();
            Value::Int(QTensor::new(m.shape(), data, spec)?)
        }
        Value::Float(m) => {
            let data = r.iter().zip(m.data()).map(|(&r, &mu)| r as f32 + mu).collect();
            Value::Float(FloatTensor::new(m.shape(), data)?)
        }
    })
}

/// Inverse gain and `g_s`.
pub fn synthesize(branch: &Branch, rp: &RatePoint, y_hat: &Value, backend: Backend) -> Result<Value> {
    let first = branch.g_s.first();
    let input = match (first.in_spec(), y_hat) {
        (Some(spec), Value::Int(q)) => Value::Int(apply_inverse_gain(q, rp, spec)?),
        (Some(_), Value::Float(_)) => {
            return Err(Error::Model("integer g_s needs an integer latent".into()));
        }
        (None, v) => Value::Float(apply_inverse_gain_float(&v.to_float(), rp)?),
    };
    branch.g_s.forward(input, backend)
}

/// Offsets `g_s` output by 128 into 8-bit planes.
pub fn to_planes(out: &Value) -> Result<Vec<Plane>> {
    let shape = out.shape();
    let pixels: Vec<u8> = match out {
        Value::Int(t) => {
            if t.spec() != PIXEL_SPEC {
                return Err(Error::SpecMismatch {
                    expected: PIXEL_SPEC.to_string(),
                    actual: t.spec().to_string(),
                });
            }
            t.data().iter().map(|&v| (v + 128).clamp(0, 255) as u8).collect()
        }
        Value::Float(t) => t
            .data()
            .iter()
            .map(|&v| (v.round() + 128.0).clamp(0.0, 255.0) as u8)
            .collect(),
    };
    pixels
        .chunks(shape.plane())
        .map(|c| Plane::new(shape.width, shape.height, c.to_vec()))
        .collect()
}

pub fn assemble(outputs: &[Value], width: usize, height: usize) -> Result<YuvImage> {
    let mut planes = Vec::with_capacity(3);
    for o in outputs {
        planes.extend(to_planes(o)?);
    }
    let [y, u, v]: [Plane; 3] = planes
        .try_into()
        .map_err(|_| Error::Model("decoder must produce three planes".into()))?;
    Ok(YuvImage::new(y, u, v)?.crop(width, height))
}

fn rate_point(branch: &Branch, rate_point: usize) -> Result<&RatePoint> {
    branch.rate_points.get(rate_point).ok_or_else(|| {
        Error::Model(format!(
            "model has {} rate points, {rate_point} requested",
            branch.rate_points.len()
        ))
    })
}

/// Latent shapes for a padded luma size.
fn expected_dims(model: &ModelGraph, width: usize, height: usize) -> Vec<PlaneDims> {
    model
        .branches
        .iter()
        .map(|b| {
            let (w, h) = (width / b.subsampling, height / b.subsampling);
            let (ls, hs) = (b.latent_stride(), b.hyper_stride());
            PlaneDims {
                latent: Shape::new(b.latent_channels(), h / ls, w / ls),
                hyper: Shape::new(b.hyper_channels(), h / hs, w / hs),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Encoded {
    pub bitstream: Vec<u8>,
    /// What the decoder reproduces, computed locally on the encoder's backend.
    pub reconstruction: YuvImage,
    /// Eight times the payload bytes after the header.
    pub rate_bits: u64,
}

pub fn encode(image: &YuvImage, model: &ModelGraph, rate_point_idx: usize, backend: Backend) -> Result<Encoded> {
    let (width, height) = (image.width(), image.height());
    let (w16, h16) = match (u16::try_from(width), u16::try_from(height)) {
        (Ok(w), Ok(h)) => (w, h),
        _ => {
            return Err(Error::Bitstream(format!(
                "{width}x{height} exceeds the 16-bit header fields"
            )))
        }
    };
    let rp_byte = u8::try_from(rate_point_idx)
        .map_err(|_| Error::Model(format!("rate point {rate_point_idx} out of range")))?;
    let padded = image.pad_to_multiple(model.alignment());
    let inputs = branch_inputs(&padded, model)?;

    let mut z_sections = Vec::new();
    let mut r_sections = Vec::new();
    let mut outputs = Vec::new();
    let mut planes = Vec::new();
    for (branch, x) in model.branches.iter().zip(&inputs) {
        let rp = rate_point(branch, rate_point_idx)?;
        let an = analyze(branch, x, rp, backend)?;
        let hyper = hyper_decode(branch, &an.z_hat, &model.entropy, backend)?;
        let r = residuals(&an.y_gained, &hyper.mu)?;
        let hb = vec![model.entropy.hyper_bin(); an.z_hat.data().len()];
        z_sections.push(range_encode(an.z_hat.data(), &hb, model.entropy.tables())?);
        r_sections.push(range_encode(&r, &hyper.bins, model.entropy.tables())?);
        let y_hat = latent_from_residuals(&r, &hyper.mu)?;
        outputs.push(synthesize(branch, rp, &y_hat, backend)?);
        planes.push(PlaneDims {
            latent: an.y_gained.shape(),
            hyper: an.z_hat.shape(),
        });
    }
    let header = Header {
        model_id: model.model_id(),
        rate_point: rp_byte,
        width: w16,
        height: h16,
        planes,
    };
    let mut bitstream = Vec::new();
    header.write(&mut bitstream);
    for s in z_sections.iter().chain(&r_sections) {
        write_section(&mut bitstream, s)?;
    }
    let rate_bits = 8 * (bitstream.len() - header.encoded_len()) as u64;
    Ok(Encoded {
        bitstream,
        reconstruction: assemble(&outputs, width, height)?,
        rate_bits,
    })
}

struct Parsed<'a> {
    header: Header,
    z: Vec<&'a [u8]>,
    r: Vec<&'a [u8]>,
}

fn parse<'a>(bytes: &'a [u8], model: &ModelGraph) -> Result<Parsed<'a>> {
    let mut reader = Reader::new(bytes);
    let header = Header::parse(&mut reader)?;
    let expected = model.model_id();
    if header.model_id != expected {
        return Err(Error::ModelMismatch {
            expected,
            found: header.model_id,
        });
    }
    if header.rate_point as usize >= model.rate_point_count() {
        return Err(Error::Bitstream(format!("rate point {} not in model", header.rate_point)));
    }
    let a = model.alignment();
    let (pw, ph) = (
        (header.width as usize).next_multiple_of(a),
        (header.height as usize).next_multiple_of(a),
    );
    if header.planes != expected_dims(model, pw, ph) {
        return Err(Error::Bitstream("latent dimensions disagree with the image size".into()));
    }
    let n = model.branches.len();
    let z = (0..n).map(|_| reader.section()).collect::<Result<Vec<_>>>()?;
    let r = (0..n).map(|_| reader.section()).collect::<Result<Vec<_>>>()?;
    if reader.remaining() != 0 {
        return Err(Error::Bitstream(format!("{} trailing bytes", reader.remaining())));
    }
    Ok(Parsed { header, z, r })
}

fn decode_branch_latent(
    branch: &Branch,
    dims: &PlaneDims,
    z_bytes: &[u8],
    r_bytes: &[u8],
    tables: &EntropyTables,
    backend: Backend,
) -> Result<Value> {
    let hb = vec![tables.hyper_bin(); dims.hyper.len()];
    let z = range_decode(z_bytes, &hb, tables.tables())?;
    let z_hat = QTensor::new(dims.hyper, z, HYPER_SPEC)?;
    let hyper = hyper_decode(branch, &z_hat, tables, backend)?;
    if hyper.mu.shape() != dims.latent {
        return Err(Error::Bitstream(format!(
            "hyper decoder produced {}, header says {}",
            hyper.mu.shape(),
            dims.latent
        )));
    }
    let r = range_decode(r_bytes, &hyper.bins, tables.tables())?;
    latent_from_residuals(&r, &hyper.mu)
}

/// Decoded latents `y_hat` per branch, before the inverse gain.
pub fn decode_latent_only(bytes: &[u8], model: &ModelGraph, backend: Backend) -> Result<Vec<Value>> {
    let p = parse(bytes, model)?;
    model
        .branches
        .iter()
        .enumerate()
        .map(|(i, b)| decode_branch_latent(b, &p.header.planes[i], p.z[i], p.r[i], &model.entropy, backend))
        .collect()
}

pub fn decode(bytes: &[u8], model: &ModelGraph, backend: Backend) -> Result<YuvImage> {
    let p = parse(bytes, model)?;
    let rp_idx = p.header.rate_point as usize;
    let mut outputs = Vec::with_capacity(model.branches.len());
    for (i, b) in model.branches.iter().enumerate() {
        let y_hat = decode_branch_latent(b, &p.header.planes[i], p.z[i], p.r[i], &model.entropy, backend)?;
        outputs.push(synthesize(b, rate_point(b, rp_idx)?, &y_hat, backend)?);
    }
    assemble(&outputs, p.header.width as usize, p.header.height as usize)
}
