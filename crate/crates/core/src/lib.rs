//! Few-shot troll detection: a transformer encoder with campaign-specific bottleneck
//! adapters, three-stage meta-learning, and an adapter registry for continual learning.

pub mod adapters;
pub mod classifier;
pub mod continual;
pub mod encoder;
pub mod episodes;
pub mod gradsuite;
pub mod error;
pub mod meta;
pub mod numerics;

pub use error::{Error, Result};

pub type Tensor64 = numerics::Tensor<f64>;
pub type ParamSet64 = numerics::ParamSet<f64>;
pub type EncoderParams64 = encoder::EncoderParams<f64>;
pub type AdapterParams64 = adapters::AdapterParams<f64>;
pub type LinearHead64 = classifier::LinearHead<f64>;
pub type AdaptiveHead64 = classifier::AdaptiveHead<f64>;

pub type Tensor32 = numerics::Tensor<f32>;
pub type EncoderParams32 = encoder::EncoderParams<f32>;
pub type AdapterParams32 = adapters::AdapterParams<f32>;
