//! Cross-backend determinism check: encode on one backend, decode on another.

use rayon::prelude::*;
use serde::Serialize;

use crate::codec::{decode, encode, format_precision, ModelGraph};
use crate::error::Result;
use crate::image::YuvImage;
use crate::metrics::mse_enc_dec;
use crate::tensor::Backend;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyCell {
    pub model: String,
    pub image: String,
    pub rate_point: usize,
    pub encoder: Backend,
    pub decoder: Backend,
    /// Infinite when decoding failed.
    pub mse_enc_dec: f64,
    pub encoder_hash: String,
    pub decoder_hash: Option<String>,
    pub error: Option<String>,
    pub pass: bool,
}

/// One model's row of the grid: mean `MSE_enc,dec` per backend pair.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyRow {
    pub model: String,
    pub precision: String,
    pub fully_quantized: bool,
    pub pairs: Vec<(Backend, Backend)>,
    pub mean_mse: Vec<f64>,
    pub all_pass: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VerifyReport {
    pub cells: Vec<VerifyCell>,
    pub grid: Vec<VerifyRow>,
}

impl VerifyReport {
    /// Failing cells of fully quantized models; these make `verify` fail.
    pub fn failures(&self) -> usize {
        let strict: Vec<&str> = self
            .grid
            .iter()
            .filter(|r| r.fully_quantized)
            .map(|r| r.model.as_str())
            .collect();
        self.cells
            .iter()
            .filter(|c| !c.pass && strict.contains(&c.model.as_str()))
            .count()
    }

    /// Grid as CSV rows: `model,precision,<enc>-><dec>...`.
    pub fn grid_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        if let Some(first) = self.grid.first() {
            let mut header = vec!["model".to_string(), "precision".to_string()];
            header.extend(first.pairs.iter().map(|(a, b)| format!("{a}->{b}")));
            w.write_record(&header)?;
        }
        for row in &self.grid {
            let mut rec = vec![row.model.clone(), row.precision.clone()];
            rec.extend(row.mean_mse.iter().map(|m| format!("{m:.6e}")));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| crate::error::Error::Csv(e.into_error().into()))
    }
}

/// Every ordered pair, same-backend pairs included.
pub fn backend_pairs(backends: &[Backend]) -> Vec<(Backend, Backend)> {
    backends
        .iter()
        .flat_map(|&a| backends.iter().map(move |&b| (a, b)))
        .collect()
}

/// Runs every model on every image, rate point and ordered backend pair.
///
/// A cell passes when the decoder output equals the encoder-side
/// reconstruction: `MSE_enc,dec = 0` and equal SHA-256 hashes. A bitstream
/// the decoder rejects fails with infinite error. Errors on the encoder
/// side abort the run.
pub fn verify(
    models: &[(String, ModelGraph)],
    images: &[(String, YuvImage)],
    backends: &[Backend],
    rate_points: &[usize],
) -> Result<VerifyReport> {
    let pairs = backend_pairs(backends);
    let jobs: Vec<(usize, usize, usize, Backend)> = (0..models.len())
        .flat_map(|m| {
            (0..images.len()).flat_map(move |i| {
                rate_points
                    .iter()
                    .flat_map(move |&rp| backends.iter().map(move |&b| (m, i, rp, b)))
            })
        })
        .collect();
    let per_job: Vec<Vec<VerifyCell>> = jobs
        .par_iter()
        .map(|&(m, i, rp, enc_backend)| {
            let (model_name, model) = &models[m];
            let (image_name, image) = &images[i];
            let enc = encode(image, model, rp, enc_backend)?;
            let enc_hash = enc.reconstruction.sha256_hex();
            Ok(backends
                .iter()
                .map(|&dec_backend| {
                    let (mse, dec_hash, error) = match decode(&enc.bitstream, model, dec_backend) {
                        Ok(d) => match mse_enc_dec(&enc.reconstruction, &d) {
                            Ok(mse) => (mse, Some(d.sha256_hex()), None),
                            Err(e) => (f64::INFINITY, Some(d.sha256_hex()), Some(e.to_string())),
                        },
                        Err(e) => (f64::INFINITY, None, Some(e.to_string())),
                    };
                    let pass = mse == 0.0 && dec_hash.as_deref() == Some(enc_hash.as_str());
                    VerifyCell {
                        model: model_name.clone(),
                        image: image_name.clone(),
                        rate_point: rp,
                        encoder: enc_backend,
                        decoder: dec_backend,
                        mse_enc_dec: mse,
                        encoder_hash: enc_hash.clone(),
                        decoder_hash: dec_hash,
                        error,
                        pass,
                    }
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let cells: Vec<VerifyCell> = per_job.into_iter().flatten().collect();

    let grid = models
        .iter()
        .map(|(name, model)| {
            let mut mean_mse = Vec::with_capacity(pairs.len());
            let mut all_pass = Vec::with_capacity(pairs.len());
            for &(a, b) in &pairs {
                let sel: Vec<&VerifyCell> = cells
                    .iter()
                    .filter(|c| &c.model == name && c.encoder == a && c.decoder == b)
                    .collect();
                let n = sel.len().max(1) as f64;
                mean_mse.push(sel.iter().map(|c| c.mse_enc_dec).sum::<f64>() / n);
                all_pass.push(sel.iter().all(|c| c.pass));
            }
            VerifyRow {
                model: name.clone(),
                precision: format_precision(model.precision_label()),
                fully_quantized: model.is_fully_quantized(),
                pairs: pairs.clone(),
                mean_mse,
                all_pass,
            }
        })
        .collect();
    Ok(VerifyReport { cells, grid })
}
