//! Learned wavelet image codec.
//!
//! The pipeline: a trainable lifting-scheme wavelet transform decorrelates
//! each color component, a conditional Gaussian-mixture entropy model priced
//! by a cross-component context network drives a range coder, and a small
//! reconstruction network cleans up quantization error after the inverse
//! transform. Encoder and decoder share every learned module; the context
//! model is evaluated on an order-stable arithmetic path so both sides see
//! bit-identical probabilities.

pub mod autodiff;
pub mod bitstream;
pub mod codec;
pub mod coder;
pub mod context;
pub mod dequant;
pub mod entropy;
pub mod error;
pub mod lifting;
pub mod model;
pub mod pixel;
pub mod trainer;

pub use error::{Error, Result};
