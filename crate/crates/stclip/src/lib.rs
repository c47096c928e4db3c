//! Zero-shot spatio-temporal action detection on frozen contrastively
//! pretrained encoders.
//!
//! The library is organized around a small autodiff tensor core and the
//! mechanism stack built on top of it:
//!
//! - [`tensor`]: dense arrays with reverse-mode gradients (generic over the
//!   storage scalar; the pipeline runs at f32, the finite-difference oracle
//!   re-runs the same code at f64)
//! - [`nn`]: transformer building blocks (multi-head attention with exposed
//!   attention maps, cross-attention, FFN, LoRA-augmented FFN, patch embed)
//! - [`encoders`]: ViT-style image encoder, text encoder, and a desk-scale
//!   contrastive pretraining routine
//! - [`model`]: temporal modeling, person adapter, person-context
//!   interaction, interest-token spotting, context prompting, classification
//! - [`data`]: synthetic multi-actor videos, manifests, label splits, clip
//!   sampling, person crops
//! - [`train`]: detection training loop with freeze masks and warmup SGD
//! - [`eval`]: IoU, average precision, frame-mAP@0.5, soft voting

pub mod data;
pub mod encoders;

pub mod error;
pub mod eval;

pub mod gradcheck;
pub mod image;
pub mod model;

pub mod nn;
pub mod rng;
pub mod scalar;
pub mod store;
pub mod train;
pub mod tensor;


pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;

/// Storage-precision tensor used by the pipeline.
pub type Tensor = tensor::Tensor<f32>;
/// Storage-precision parameter store used by the pipeline.
pub type ParamStore = store::ParamStore<f32>;
/// Gradients at storage precision.
pub type GradStore = tensor::autograd::GradStore<f32>;
