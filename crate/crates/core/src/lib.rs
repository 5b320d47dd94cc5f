pub mod codec;
pub mod error;
pub mod harness;
pub mod image;
pub mod metrics;
pub mod quant;
pub mod tensor;

pub use error::{Error, Result};
