//! Hyperprior codec: model graph, entropy coding and the bitstream.

pub mod bitstream;
mod coding;
pub mod entropy;
mod fixture;
mod gain;
pub mod manifest;
mod model;
pub mod range_coder;

pub use coding::{
    analyze, assemble, branch_inputs, decode, decode_latent_only, encode, hyper_decode, latent_from_residuals, residuals,
    scale_bins, synthesize, to_planes, Analysis, Encoded, HyperOutput,
};
pub use entropy::{estimate_rate, EntropyTables};
pub use fixture::{make_fixture_model, FixtureOptions, ADVERSARIAL_GS, ADVERSARIAL_HMU, DERIVED_GAIN_FACTOR};
pub use gain::{apply_gain, apply_inverse_gain, apply_inverse_gain_float};
pub use model::{
    format_precision, Block, Branch, ExecState, Layer, LayerParams, LayerRole, ModelGraph, Provenance, RatePoint,
    Subnet, SubnetKind, Value, HYPER_SPEC, IG_MAX, PIXEL_SPEC,
};
pub use range_coder::{range_decode, range_encode, FreqTable};
