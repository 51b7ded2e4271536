//! Text-bridged cross-modal attention alignment for zero-shot sketch-based
//! image retrieval.

pub mod align;
pub mod attention;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod params;
pub mod tensor;
pub mod text;
pub mod train;
pub mod vision;

pub use config::{DataConfig, RunConfig};
pub use error::{Error, Result};
pub use model::{Model, ModelConfig};
pub use tensor::Tensor;
