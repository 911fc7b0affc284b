//! Multichannel attention LSTM for sequence-level regression over
//! per-channel visual feature streams, with baselines, evaluation and a
//! synthetic data generator.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix it to `f64`.

// Negated comparisons deliberately reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod scalar;
pub mod synth;
pub mod tensor;
pub mod training;

pub use channel::{Channel, ChannelSet, PerChannel};
pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;

pub type Tensor64 = tensor::Tensor<f64>;
pub type ModelParams64 = model::ModelParams<f64>;
pub type VolumeSequence64 = data::VolumeSequence<f64>;
pub type Dataset64 = data::Dataset<f64>;
pub type Gradients64 = autodiff::Gradients<f64>;
pub type LstmModel64 = evaluation::LstmModel<f64>;
pub type SvrParams64 = baselines::SvrParams<f64>;
