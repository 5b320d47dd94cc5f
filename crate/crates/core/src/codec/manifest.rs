//! Model files: a JSON manifest next to a little-endian weight blob.
//!
//! Every decoder-relevant number lives either in the blob or in the manifest,
//! and the model id is a digest over both, so a bitstream names the exact
//! bytes it was produced with.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::entropy::{EntropyTables, NUM_BINS, SYMBOL_MAX, SYMBOL_MIN};
use super::model::{Block, Branch, Layer, LayerParams, ModelGraph, Provenance, RatePoint, Subnet};
use super::range_coder::PROB_BITS;
use crate::error::{Error, Result};
use crate::tensor::{ActSpec, Activation, ConvGeometry, FloatConv, QConvLayer};

pub const FORMAT: &str = "detlic-model";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    I8,
    I16,
    I32,
    U32,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::I8 => 1,
            DType::I16 => 2,
            DType::F32 | DType::I32 | DType::U32 => 4,
        }
    }
}

/// A typed array inside the blob.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub dtype: DType,
    pub offset: u64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum PrecisionEntry {
    F32,
    Int {
        weight_bits: u32,
        exponents: Vec<u32>,
        in_spec: ActSpec,
        out_spec: ActSpec,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub name: String,
    pub geometry: ConvGeometry,
    pub activation: Activation,
    pub precision: PrecisionEntry,
    pub weights: Span,
    pub bias: Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum BlockEntry {
    Conv { layer: LayerEntry },
    Residual { first: LayerEntry, second: LayerEntry },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubnetsEntry {
    pub g_a: Vec<BlockEntry>,
    pub h_a: Vec<BlockEntry>,
    pub h_mu: Vec<BlockEntry>,
    pub h_sigma: Vec<BlockEntry>,
    pub g_s: Vec<BlockEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatePointEntry {
    pub gain: Vec<f32>,
    pub inverse_gain: Vec<f32>,
    pub inverse_gain_q: Vec<i32>,
    pub inverse_gain_exp: u32,
    pub derived: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchEntry {
    pub name: String,
    pub in_channels: usize,
    pub subsampling: usize,
    pub subnets: SubnetsEntry,
    pub rate_points: Vec<RatePointEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub file: String,
    pub size: u64,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntropyEntry {
    pub bins: usize,
    pub symbol_min: i32,
    pub symbol_max: i32,
    pub prob_bits: u32,
    /// Bin edges (`bins - 1` Q16 scales) followed by one CDF per bin, all u32.
    pub data: Span,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    /// Hex of the first four bytes of `sha256(blob || manifest with empty id and file)`.
    pub model_id: String,
    pub provenance: Provenance,
    pub leaky_shift: u32,
    pub blob: BlobEntry,
    pub entropy: EntropyEntry,
    pub branches: Vec<BranchEntry>,
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn push<T: Copy>(&mut self, dtype: DType, values: &[T], enc: impl Fn(T, &mut Vec<u8>)) -> Span {
        let offset = self.bytes.len() as u64;
        for &v in values {
            enc(v, &mut self.bytes);
        }
        Span {
            dtype,
            offset,
            count: values.len() as u64,
        }
    }

    fn layer(&mut self, layer: &Layer) -> LayerEntry {
        let (precision, weights, bias) = match &layer.params {
            LayerParams::Float(c) => (
                PrecisionEntry::F32,
                self.push(DType::F32, &c.weights, |v, o| o.extend_from_slice(&v.to_le_bytes())),
                self.push(DType::F32, &c.bias, |v, o| o.extend_from_slice(&v.to_le_bytes())),
            ),
            LayerParams::Int(q) => {
                let weights = if q.weight_bits() == 8 {
                    self.push(DType::I8, q.weights(), |v, o| o.push(v as i8 as u8))
                } else {
                    self.push(DType::I16, q.weights(), |v, o| {
                        o.extend_from_slice(&(v as i16).to_le_bytes())
                    })
                };
                let bias = self.push(DType::I32, q.bias(), |v, o| o.extend_from_slice(&v.to_le_bytes()));
                (
                    PrecisionEntry::Int {
                        weight_bits: q.weight_bits(),
                        exponents: q.exponents().to_vec(),
                        in_spec: q.in_spec(),
                        out_spec: q.out_spec(),
                    },
                    weights,
                    bias,
                )
            }
        };
        LayerEntry {
            name: layer.name.clone(),
            geometry: *layer.geometry(),
            activation: layer.activation,
            precision,
            weights,
            bias,
        }
    }

    fn subnet(&mut self, net: &Subnet) -> Vec<BlockEntry> {
        net.blocks()
            .iter()
            .map(|b| match b {
                Block::Conv(l) => BlockEntry::Conv { layer: self.layer(l) },
                Block::Residual { first, second } => BlockEntry::Residual {
                    first: self.layer(first),
                    second: self.layer(second),
                },
            })
            .collect()
    }
}

fn rate_point_entry(rp: &RatePoint) -> RatePointEntry {
    RatePointEntry {
        gain: rp.gain.clone(),
        inverse_gain: rp.inverse_gain.clone(),
        inverse_gain_q: rp.inverse_gain_q.clone(),
        inverse_gain_exp: rp.inverse_gain_exp,
        derived: rp.derived,
    }
}

fn hash_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Serialized manifest text: pretty JSON with a trailing newline.
pub fn manifest_text(m: &Manifest) -> Result<Vec<u8>> {
    let mut text = serde_json::to_vec_pretty(m)?;
    text.push(b'\n');
    Ok(text)
}

/// Digest over the blob and the manifest with its id and blob file name blanked,
/// so renaming the files keeps the id.
pub fn compute_model_id(manifest: &Manifest, blob: &[u8]) -> Result<String> {
    let mut blank = manifest.clone();
    blank.model_id = String::new();
    blank.blob.file = String::new();
    let mut h = Sha256::new();
    h.update(blob);
    h.update(manifest_text(&blank)?);
    Ok(hex::encode(&h.finalize()[..4]))
}

impl ModelGraph {
    /// Builds the manifest (for a blob file named `blob_file`) and the blob bytes.
    pub fn to_files(&self, blob_file: &str) -> Result<(Manifest, Vec<u8>)> {
        let mut w = BlobWriter { bytes: Vec::new() };
        let branches = self
            .branches
            .iter()
            .map(|b| BranchEntry {
                name: b.name.clone(),
                in_channels: b.in_channels,
                subsampling: b.subsampling,
                subnets: SubnetsEntry {
                    g_a: w.subnet(&b.g_a),
                    h_a: w.subnet(&b.h_a),
                    h_mu: w.subnet(&b.h_mu),
                    h_sigma: w.subnet(&b.h_sigma),
                    g_s: w.subnet(&b.g_s),
                },
                rate_points: b.rate_points.iter().map(rate_point_entry).collect(),
            })
            .collect();
        let table_bytes = self.entropy.to_bytes();
        let data = Span {
            dtype: DType::U32,
            offset: w.bytes.len() as u64,
            count: (table_bytes.len() / 4) as u64,
        };
        w.bytes.extend_from_slice(&table_bytes);
        let mut manifest = Manifest {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            model_id: String::new(),
            provenance: self.provenance.clone(),
            leaky_shift: self.leaky_shift,
            blob: BlobEntry {
                file: blob_file.into(),
                size: w.bytes.len() as u64,
                sha256: hash_hex(&w.bytes),
            },
            entropy: EntropyEntry {
                bins: self.entropy.tables().len(),
                symbol_min: SYMBOL_MIN,
                symbol_max: SYMBOL_MAX,
                prob_bits: PROB_BITS,
                data,
                sha256: hash_hex(&table_bytes),
            },
            branches,
        };
        manifest.model_id = compute_model_id(&manifest, &w.bytes)?;
        Ok((manifest, w.bytes))
    }

    /// 32-bit identifier written into every bitstream.
    pub fn model_id(&self) -> u32 {
        let (m, _) = self.to_files("model.bin").expect("in-memory model serializes");
        u32::from_str_radix(&m.model_id, 16).expect("hex id")
    }

    /// Writes `<manifest>` and the blob beside it (same stem, `.bin`).
    pub fn save(&self, manifest_path: &Path) -> Result<()> {
        let blob_path = blob_path_for(manifest_path);
        let blob_name = blob_path
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::Model(format!("bad manifest path {}", manifest_path.display())))?
            .to_string();
        let (manifest, blob) = self.to_files(&blob_name)?;
        fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
        fs::write(manifest_path, manifest_text(&manifest)?).map_err(|e| Error::io(manifest_path, e))?;
        Ok(())
    }

    pub fn load(manifest_path: &Path) -> Result<Self> {
        let text = fs::read(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
        let manifest: Manifest = serde_json::from_slice(&text)?;
        let dir = manifest_path.parent().unwrap_or(Path::new("."));
        let blob_path = dir.join(&manifest.blob.file);
        let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
        Self::from_files(&manifest, &blob)
    }

    pub fn from_files(manifest: &Manifest, blob: &[u8]) -> Result<Self> {
        if manifest.format != FORMAT || manifest.version != FORMAT_VERSION {
            return Err(Error::Model(format!(
                "unsupported format {} v{}",
                manifest.format, manifest.version
            )));
        }
        let actual = hash_hex(blob);
        if actual != manifest.blob.sha256 {
            return Err(Error::Digest {
                what: "weight blob",
                expected: manifest.blob.sha256.clone(),
                actual,
            });
        }
        if blob.len() as u64 != manifest.blob.size {
            return Err(Error::Model(format!(
                "blob is {} bytes, manifest says {}",
                blob.len(),
                manifest.blob.size
            )));
        }
        let id = compute_model_id(manifest, blob)?;
        if id != manifest.model_id {
            return Err(Error::Digest {
                what: "model id",
                expected: manifest.model_id.clone(),
                actual: id,
            });
        }
        let e = &manifest.entropy;
        if (e.symbol_min, e.symbol_max, e.prob_bits, e.bins) != (SYMBOL_MIN, SYMBOL_MAX, PROB_BITS, NUM_BINS) {
            return Err(Error::Model("unsupported entropy table layout".into()));
        }
        let table_bytes = span_bytes(blob, &e.data, DType::U32)?;
        let actual = hash_hex(table_bytes);
        if actual != e.sha256 {
            return Err(Error::Digest {
                what: "entropy tables",
                expected: e.sha256.clone(),
                actual,
            });
        }
        let entropy = EntropyTables::from_bytes(table_bytes, e.bins)?;
        let branches = manifest
            .branches
            .iter()
            .map(|b| {
                let s = &b.subnets;
                Ok(Branch {
                    name: b.name.clone(),
                    in_channels: b.in_channels,
                    subsampling: b.subsampling,
                    g_a: read_subnet(&s.g_a, blob)?,
                    h_a: read_subnet(&s.h_a, blob)?,
                    h_mu: read_subnet(&s.h_mu, blob)?,
                    h_sigma: read_subnet(&s.h_sigma, blob)?,
                    g_s: read_subnet(&s.g_s, blob)?,
                    rate_points: b
                        .rate_points
                        .iter()
                        .map(|r| RatePoint {
                            gain: r.gain.clone(),
                            inverse_gain: r.inverse_gain.clone(),
                            inverse_gain_q: r.inverse_gain_q.clone(),
                            inverse_gain_exp: r.inverse_gain_exp,
                            derived: r.derived,
                        })
                        .collect(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let model = ModelGraph {
            provenance: manifest.provenance.clone(),
            leaky_shift: manifest.leaky_shift,
            branches,
            entropy,
        };
        model.validate()?;
        Ok(model)
    }
}

pub fn blob_path_for(manifest_path: &Path) -> PathBuf {
    manifest_path.with_extension("bin")
}

fn span_bytes<'a>(blob: &'a [u8], span: &Span, dtype: DType) -> Result<&'a [u8]> {
    if span.dtype != dtype {
        return Err(Error::Model(format!("expected {dtype:?} data, found {:?}", span.dtype)));
    }
    let start = span.offset as usize;
    let end = span
        .count
        .checked_mul(dtype.size() as u64)
        .and_then(|n| n.checked_add(span.offset))
        .map(|e| e as usize)
        .filter(|&e| e <= blob.len())
        .ok_or_else(|| Error::Model(format!("span {span:?} runs past the blob")))?;
    Ok(&blob[start..end])
}

fn read_f32(blob: &[u8], span: &Span) -> Result<Vec<f32>> {
    Ok(span_bytes(blob, span, DType::F32)?
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

fn read_ints(blob: &[u8], span: &Span) -> Result<Vec<i32>> {
    let bytes = span_bytes(blob, span, span.dtype)?;
    Ok(match span.dtype {
        DType::I8 => bytes.iter().map(|&b| b as i8 as i32).collect(),
        DType::I16 => bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes(c.try_into().unwrap()) as i32)
            .collect(),
        DType::I32 => bytes
            .chunks_exact(4)
            .map(|c| i32::from_le_bytes(c.try_into().unwrap()))
            .collect(),
        other => return Err(Error::Model(format!("{other:?} is not an integer weight type"))),
    })
}

fn read_layer(e: &LayerEntry, blob: &[u8]) -> Result<Layer> {
    e.geometry.validate()?;
    let check = |span: &Span, n: usize, what: &str| {
        if span.count as usize != n {
            Err(Error::Model(format!(
                "layer {}: {} {what} for geometry needing {n}",
                e.name, span.count
            )))
        } else {
            Ok(())
        }
    };
    check(&e.weights, e.geometry.weight_len(), "weights")?;
    check(&e.bias, e.geometry.out_channels, "biases")?;
    let params = match &e.precision {
        PrecisionEntry::F32 => LayerParams::Float(FloatConv::new(
            e.geometry,
            read_f32(blob, &e.weights)?,
            read_f32(blob, &e.bias)?,
        )?),
        PrecisionEntry::Int {
            weight_bits,
            exponents,
            in_spec,
            out_spec,
        } => {
            let want = if *weight_bits == 8 { DType::I8 } else { DType::I16 };
            if e.weights.dtype != want || e.bias.dtype != DType::I32 {
                return Err(Error::Model(format!("layer {}: integer widths disagree", e.name)));
            }
            let layer = QConvLayer::new(
                e.geometry,
                *weight_bits,
                read_ints(blob, &e.weights)?,
                exponents.clone(),
                read_ints(blob, &e.bias)?,
                *in_spec,
                *out_spec,
                e.activation,
            )
            .map_err(|err| Error::Model(format!("layer {}: {err}", e.name)))?;
            LayerParams::Int(layer)
        }
    };
    Ok(Layer {
        name: e.name.clone(),
        activation: e.activation,
        params,
    })
}

fn read_subnet(blocks: &[BlockEntry], blob: &[u8]) -> Result<Subnet> {
    let blocks = blocks
        .iter()
        .map(|b| {
            Ok(match b {
                BlockEntry::Conv { layer } => Block::Conv(read_layer(layer, blob)?),
                BlockEntry::Residual { first, second } => Block::Residual {
                    first: read_layer(first, blob)?,
                    second: read_layer(second, blob)?,
                },
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Subnet::new(blocks))
}
