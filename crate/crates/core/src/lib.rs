//! Masked discrete diffusion over a unified text, vision and speech
//! vocabulary, trained on small synthetic worlds.

pub mod backbone;
pub mod diffusion;
pub mod error;
pub mod merging;
pub mod pipeline;
pub mod sampler;
pub mod synth;
pub mod templates;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
