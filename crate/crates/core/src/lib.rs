//! Desk-scale post-training quantization lab for vision transformers.
//!
//! The crate provides a small dense [`Tensor`], a suite of quantizers
//! (uniform, log2, log√2, shift-uniform-log2 and the tan quantizer), a
//! fixed-point CORDIC kernel, channel-wise → layer-wise scale
//! reparameterization, a toy ViT encoder with fake-quant insertion points,
//! and the three-stage calibrate → reconstruct → reparameterize → reconstruct
//! pipeline.

pub mod cordic;
pub mod dqt;
pub mod error;
pub mod pipeline;
pub mod quantizers;
pub mod reparam;
pub mod tensor;
pub mod toyvit;

pub use error::{Error, Result};
pub use quantizers::{Granularity, QuantParams, Quantizer, QuantizerKind, SearchGrid, TanParams};
pub use tensor::{IntTensor, Tensor};
