//! Desk-scale multilingual zero-shot TTS pipeline.

pub mod error;
pub mod eval;
pub mod armodel;
pub mod conditioning;
pub mod config;
pub mod dsp;
pub mod nn;
pub mod sampler;
pub mod speaker;
pub mod tensor;
pub mod text;
pub mod vocoder;
pub mod vqvae;

pub use error::{Error, Result};
