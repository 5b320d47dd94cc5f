//! Run configuration: a JSON file whose fields the command line may override.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{ModelGraph, SubnetKind};
use crate::error::{Error, Result};
use crate::image::{load_image, YuvImage};
use crate::quant::{QuantConfig, WeightBits};
use crate::tensor::Backend;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Quantize,
    Encode,
    Decode,
    Eval,
    Verify,
    Bdrate,
    MakeFixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Option<Mode>,
    /// Model under test, or the float model to quantize.
    pub model: Option<PathBuf>,
    /// Further models for `verify` and `eval`.
    pub models: Vec<PathBuf>,
    /// Reference model for `eval`; reference curve for `bdrate`.
    pub anchor: Option<PathBuf>,
    /// Image files, or directories scanned for `.ppm` and `.y4m`.
    pub images: Vec<PathBuf>,
    /// Input of `decode`.
    pub bitstream: Option<PathBuf>,
    /// Output directory, or the output file of `encode`, `decode` and
    /// `make-fixture`.
    pub output: Option<PathBuf>,
    pub quant: QuantConfig,
    /// Last decoder subnet `quantize` handles; `None` runs all three steps.
    pub until: Option<SubnetKind>,
    pub backends: Vec<Backend>,
    /// Empty means every rate point of the model.
    pub rate_points: Vec<usize>,
    pub seed: u64,
    pub adversarial: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            mode: None,
            model: None,
            models: Vec::new(),
            anchor: None,
            images: Vec::new(),
            bitstream: None,
            output: None,
            quant: QuantConfig::new(WeightBits::Int16, WeightBits::Int16),
            until: None,
            backends: Backend::ALL.to_vec(),
            rate_points: Vec::new(),
            seed: 0,
            adversarial: false,
        }
    }
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn require_exists(what: &str, path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(config_err(format!("{what} {} does not exist", path.display())))
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))
    }

    /// Compact JSON, as echoed into reports.
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// `model` followed by `models`.
    pub fn model_paths(&self) -> Vec<PathBuf> {
        self.model.iter().chain(&self.models).cloned().collect()
    }

    pub fn output_dir(&self) -> Result<&Path> {
        self.output.as_deref().ok_or_else(|| config_err("no output path"))
    }

    /// Checks that everything `mode` needs is present.
    pub fn validate(&self, mode: Mode) -> Result<()> {
        let need_images = matches!(mode, Mode::Quantize | Mode::Eval | Mode::Verify);
        let need_model = matches!(mode, Mode::Quantize | Mode::Encode | Mode::Decode);
        if need_model && self.model.is_none() {
            return Err(config_err("no model given"));
        }
        if need_images && self.images.is_empty() {
            return Err(config_err("no images given"));
        }
        match mode {
            Mode::Encode if self.images.len() != 1 => return Err(config_err("encode takes exactly one image")),
            Mode::Decode if self.bitstream.is_none() => return Err(config_err("no bitstream given")),
            Mode::Verify if self.backends.is_empty() => return Err(config_err("no backends to verify")),
            Mode::Verify | Mode::Eval if self.model_paths().is_empty() => {
                return Err(config_err("no models given"))
            }
            Mode::Eval | Mode::Bdrate if self.anchor.is_none() => return Err(config_err("no anchor given")),
            Mode::Bdrate if self.model.is_none() => return Err(config_err("no test curve given")),
            _ => {}
        }
        if mode != Mode::Bdrate {
            self.output_dir()?;
        }
        for p in self.model_paths().iter().chain(&self.anchor) {
            require_exists("model", p)?;
        }
        if let Some(p) = &self.bitstream {
            require_exists("bitstream", p)?;
        }
        if let Some(k) = self.until {
            if !SubnetKind::DECODER.contains(&k) {
                return Err(config_err(format!("{k} is not a decoder subnet")));
            }
        }
        for p in &self.images {
            require_exists("image path", p)?;
        }
        self.quant.grid()?;
        Ok(())
    }

    /// Image files named by `images`, directories expanded in name order.
    pub fn image_files(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for p in &self.images {
            if p.is_dir() {
                let mut found: Vec<PathBuf> = std::fs::read_dir(p)
                    .map_err(|e| Error::io(p, e))?
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|f| matches!(f.extension().and_then(|e| e.to_str()), Some("ppm" | "y4m")))
                    .collect();
                found.sort();
                out.extend(found);
            } else {
                out.push(p.clone());
            }
        }
        if out.is_empty() {
            return Err(config_err("image directories contain no .ppm or .y4m files"));
        }
        Ok(out)
    }

    /// Loaded images keyed by file name.
    pub fn load_images(&self) -> Result<Vec<(String, YuvImage)>> {
        self.image_files()?
            .iter()
            .map(|p| Ok((display_name(p), load_image(p)?)))
            .collect()
    }

    pub fn rate_points_for(&self, model: &ModelGraph) -> Result<Vec<usize>> {
        let n = model.rate_point_count();
        if self.rate_points.is_empty() {
            return Ok((0..n).collect());
        }
        if let Some(&bad) = self.rate_points.iter().find(|&&r| r >= n) {
            return Err(config_err(format!("rate point {bad} not in a model with {n}")));
        }
        Ok(self.rate_points.clone())
    }
}

/// File name without directories, for report rows.
pub fn display_name(p: &Path) -> String {
    p.file_name()
        .map_or_else(|| p.display().to_string(), |f| f.to_string_lossy().into_owned())
}
