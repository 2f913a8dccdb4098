//! Numerical core of the speaker-embedding toolkit.

pub mod dsp;
pub mod error;
pub mod extractor;
pub mod nn;
pub mod objectives;
mod scalar;
pub mod scoring;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Double-precision aliases, used by the recipe and the registry.
pub type Tensor64 = nn::Tensor<f64>;
pub type Graph64 = nn::Graph<f64>;
pub type ParamStore64 = nn::ParamStore<f64>;
pub type Waveform64 = dsp::Waveform<f64>;
pub type Extractor64 = extractor::Extractor<f64>;
pub type Embedding64 = extractor::SpeakerEmbedding<f64>;

/// Single-precision aliases.
pub type Tensor32 = nn::Tensor<f32>;
pub type Graph32 = nn::Graph<f32>;
pub type Waveform32 = dsp::Waveform<f32>;
pub type Extractor32 = extractor::Extractor<f32>;
