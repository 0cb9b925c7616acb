//! Lightweight long-range generative adversarial networks at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense tensors, reverse-mode autodiff, gradient checking, Adam.
//! - [`nn`]: parameter storage, layers, and the residual / upsampling /
//!   self-attention blocks.
//! - [`long_range`]: the spatial and channel long-range modules.
//! - [`model`]: the multi-stage generator, per-stage discriminators and the
//!   metadata embedder.
//! - [`objectives`]: color consistency and adversarial losses.
//! - [`trainer`]: alternating optimisation, checkpoints, metrics.
//! - [`eval`]: synthetic datasets, image IO, Fréchet-lite and symmetry scores.

pub mod error;
pub mod eval;
pub mod gradsuite;
pub mod long_range;
pub mod model;
pub mod nn;
pub mod objectives;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
