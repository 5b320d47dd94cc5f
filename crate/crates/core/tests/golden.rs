//! Committed bitstreams: encoding must reproduce them byte for byte and
//! decoding them must give the recorded reconstructions. Run with
//! `DETLIC_BLESS=1` to rewrite the files after an intended format change.

use std::path::PathBuf;

use detlic_core::codec::*;
use detlic_core::image::synthetic_image;
use detlic_core::quant::{quantize_decoder_pipeline, CalibrationSet, QuantConfig, WeightBits};
use detlic_core::tensor::Backend;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, PartialEq, Serialize, Deserialize)]
struct Entry {
    file: String,
    model: String,
    rate_point: usize,
    bitstream_sha256: String,
    reconstruction_sha256: String,
}

fn data_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data/golden")
}

fn models() -> Vec<(&'static str, ModelGraph)> {
    let float = make_fixture_model(FixtureOptions {
        seed: 1,
        adversarial: false,
    })
    .unwrap();
    let mut cfg = QuantConfig::new(WeightBits::Int16, WeightBits::Int16);
    cfg.scale_exps = vec![4, 8, 12];
    cfg.clips = vec![32767, 4095];
    let calib = CalibrationSet::new(vec![synthetic_image(64, 64, 900).unwrap()]).unwrap();
    let quant = quantize_decoder_pipeline(&float, calib, &cfg).unwrap().model().clone();
    vec![("float", float), ("int16", quant)]
}

#[test]
fn golden_bitstreams() {
    let bless = std::env::var_os("DETLIC_BLESS").is_some();
    let dir = data_dir();
    let image = synthetic_image(40, 24, 5).unwrap();
    let mut entries = Vec::new();
    let mut streams = Vec::new();
    for (name, model) in models() {
        for rp in [0, 2, 4] {
            let e = encode(&image, &model, rp, Backend::Reference).unwrap();
            entries.push(Entry {
                file: format!("{name}_rp{rp}.bit"),
                model: name.into(),
                rate_point: rp,
                bitstream_sha256: hex::encode(Sha256::digest(&e.bitstream)),
                reconstruction_sha256: e.reconstruction.sha256_hex(),
            });
            streams.push((model.clone(), e.bitstream));
        }
    }
    let index = dir.join("index.json");
    if bless {
        std::fs::create_dir_all(&dir).unwrap();
        for (entry, (_, bits)) in entries.iter().zip(&streams) {
            std::fs::write(dir.join(&entry.file), bits).unwrap();
        }
        std::fs::write(&index, serde_json::to_string_pretty(&entries).unwrap() + "\n").unwrap();
    }

    let stored: Vec<Entry> = serde_json::from_str(&std::fs::read_to_string(&index).unwrap()).unwrap();
    assert_eq!(stored, entries, "encoder output drifted from the committed bitstreams");
    for (entry, (model, fresh)) in stored.iter().zip(&streams) {
        let bits = std::fs::read(dir.join(&entry.file)).unwrap();
        assert_eq!(&bits, fresh, "{}", entry.file);
        // every backend for the integer decoder; the float decoder is only
        // pinned on the backend that encoded it
        let backends: &[Backend] = if model.is_fully_quantized() {
            &Backend::ALL
        } else {
            &[Backend::Reference]
        };
        for &b in backends {
            let rec = decode(&bits, model, b).unwrap();
            assert_eq!(rec.sha256_hex(), entry.reconstruction_sha256, "{} on {b}", entry.file);
        }
    }
}
