pub mod bitstream;
pub mod cli;
pub mod codec;
pub mod config;
pub mod dataio;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod metrics;
pub mod pipeline;
pub mod tensor;
pub mod training;
mod wire;

pub use error::{Error, Result};
pub use tensor::Tensor;
