//! Multiscale wavelet image tokenization and coarse-to-fine autoregressive
//! modeling.
//!
//! The pipeline maps an image through a multilevel Haar transform, patchifies
//! each scale into a fixed number of tokens, runs the token sequence through
//! transformers with optional scale-causal attention and per-scale parameters,
//! and snaps features to per-scale codebooks. A second-stage autoregressive
//! model over the discrete codes supports early-stopped coarse generation,
//! prefix-conditioned upsampling, and coarse-frozen editing.
//!
//! The crate is `no_std + alloc`: all state lives in plain buffers and every
//! operation is deterministic given its seed. IO, file formats and the CLI
//! live in the companion `wavetok` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod ar;
pub mod autodiff;
pub mod nn;
pub mod patch;
pub mod quantizer;
pub mod rng;
pub mod tensor;
pub mod tokenizer;
pub mod wavelet;

pub use tensor::Tensor;
pub use wavelet::{DwtPyramid, ImageTensor};
