//! Adaptive vision transformer for few-shot cross-domain liveness
//! classification, built from scratch at desk scale.
//!
//! The crate provides:
//! - a minimal dense-tensor library with reverse-mode autodiff and Adam
//!   ([`tensor`]),
//! - the adaptive ViT: patch embedding, transformer blocks, ensemble adapter
//!   modules, feature-wise transformation (FWT) layers, and an MLP head
//!   ([`model`]),
//! - the balanced multi-domain cross-entropy and the ensemble cosine
//!   diversity loss ([`losses`]),
//! - a synthetic multi-domain image generator with an on-disk dataset format
//!   and the balanced batch sampler ([`data`]),
//! - the three-stage train/test pipeline with checkpointing and the
//!   leave-one-out protocol runner ([`pipeline`]),
//! - exact binary-classification metrics: ROC, AUC, EER, HTER, TPR@FPR
//!   ([`metrics`]),
//! - finite-difference gradient checking of the composed model ([`gradcheck`]).
//!
//! All numeric code is generic over [`scalar::Scalar`]; `f32` is the training
//! precision and `f64` the gradient-check precision. The aliases below pin
//! the two supported instantiations.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod pipeline;
pub mod rng;
pub mod scalar;
pub mod tensor;

pub use error::{Error, Result};

/// Autodiff tape over the training precision.
pub type Tape32 = tensor::tape::Tape<f32>;
/// Autodiff tape over the gradient-check precision.
pub type Tape64 = tensor::tape::Tape<f64>;
/// Model over the training precision.
pub type Model32 = model::AdaptiveVit<f32>;
/// Model over the gradient-check precision.
pub type Model64 = model::AdaptiveVit<f64>;
