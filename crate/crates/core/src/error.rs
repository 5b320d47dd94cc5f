use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("activation spec mismatch: expected {expected}, got {actual}")]
    SpecMismatch { expected: String, actual: String },

    #[error("invalid activation spec: {0}")]
    InvalidSpec(String),

    #[error("negative requantization shift {shift} on channel {channel}")]
    NegativeShift { channel: usize, shift: i32 },

    #[error("overflow certificate violated on channel {channel}: worst case {worst_case} > 2^31 - 1")]
    Certificate { channel: usize, worst_case: i128 },

    #[error("layer {layer}: no exponent keeps channel {channel} inside the 32-bit accumulator")]
    Infeasible { layer: String, channel: usize },

    #[error("configuration: {0}")]
    Config(String),

    #[error("verification failed: {failures} cells of fully quantized models differ")]
    VerifyFailed { failures: usize },

    #[error("quantizer configuration: {0}")]
    QuantConfig(String),

    #[error("range coder: symbol {symbol} outside table range")]
    SymbolRange { symbol: i32 },

    #[error("range decoder desynchronised: {0}")]
    Desync(&'static str),

    #[error("malformed bitstream: {0}")]
    Bitstream(String),

    #[error("bitstream was produced for model {found:08x}, loaded model is {expected:08x}")]
    ModelMismatch { expected: u32, found: u32 },

    #[error("model format: {0}")]
    Model(String),

    #[error("digest mismatch for {what}: manifest says {expected}, content hashes to {actual}")]
    Digest {
        what: &'static str,
        expected: String,
        actual: String,
    },

    #[error("image: {0}")]
    Image(String),

    #[error("metric: {0}")]
    Metric(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
