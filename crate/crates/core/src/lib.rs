//! Mixture-of-disentangled-experts regression over text, visual and audio
//! feature sequences with randomly missing inputs.

pub mod config;
pub mod data;
pub mod encoder;
pub mod hed;
pub mod mlcr;
pub mod model;
pub mod mrf;
pub mod nn;
pub mod scalar;
pub mod tensor;
pub mod train_eval;

pub use scalar::Scalar;

/// Double-precision model, the precision used for training.
pub type Model = model::Derl<f64>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Graph64 = tensor::Graph<f64>;
pub type ParamStore64 = tensor::ParamStore<f64>;
