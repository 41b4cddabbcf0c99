//! Desk-scale multimodal assistant for electron micrograph analysis: a
//! from-scratch vision encoder, a gated cross-attention fusion decoder with
//! dynamic quantized low-rank adapters, a full manual-backprop training
//! stack, and caption/VQA evaluation metrics.

pub mod adam;
pub mod adapter;
pub mod checkpoint;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod image;
pub mod metrics;
pub mod ops;
pub mod prng;
pub mod quant;
pub mod tensor;
pub mod trainer;
pub mod vision;
pub mod vocab;

pub use error::{Error, Result};
