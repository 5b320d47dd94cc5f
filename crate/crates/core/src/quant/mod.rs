//! Post-training quantization of the decoder subnetworks.

pub mod calibrate;
pub mod channel;
pub mod pipeline;
pub mod witness;

pub use calibrate::{
    calibrate_activation_spec, select_act_spec, BdScores, CalibrationSet, Calibrator, LayerTarget, QuantConfig,
    GRID_CLIPS,
};
pub use channel::{
    max_output_scale, max_safe_exponent, quantize_channel, quantize_channel_16, quantize_channel_8_search,
    quantize_layer, ChannelQuantResult, WeightBits, K_CAP,
};
pub use pipeline::{
    check_certificates, quantize_decoder_pipeline, quantize_until, quantize_with, LayerDecision, PipelineOutput, PipelineStep,
    SpecSource, StepReport,
};
pub use witness::{overflow_witness_check, witness_rows, ChannelWitness, WitnessReport};
