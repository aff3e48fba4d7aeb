//! Cross-expert video (and audio) transformers on a small reverse-mode
//! autodiff engine.

pub mod analysis;
pub mod attention;
pub mod autograd;
pub mod bca;
pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod param;
pub mod rng;
pub mod session;
pub mod synthdata;
pub mod tensor;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
