//! Discrete codex-guided masked modeling for multichannel intracranial
//! recordings, as an allocation-only library.
//!
//! The crate covers the whole numeric pipeline:
//!
//! - [`signal`]: recordings, trials, pretraining segments, augmentation,
//!   stratified splits and a seeded synthetic corpus;
//! - [`preprocess`]: zero-phase Butterworth band-pass, notch, polyphase
//!   resampling, bipolar re-referencing and z-scoring;
//! - [`autograd`], [`optim`], [`gradcheck`]: a reverse-mode tape over dense
//!   tensors, AdamW with a cosine warm-up schedule and a finite-difference checker;
//! - [`encoder`], [`quantizer`], [`vqvae`], [`mae`], [`downstream`]: the
//!   patch encoder, the cosine-distance vector quantizer with EMA codex
//!   maintenance, the tokenizer training stage, symmetric masked token
//!   modeling and word classification with channel-contribution analysis.
//!
//! File formats, configuration and the command line live in the `duin` crate.
#![cfg_attr(not(any(feature = "std", test)), no_std)]
// `!(x > 0.0)` style guards deliberately reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod autograd;
pub mod config;
pub mod downstream;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod layers;
pub mod mae;
pub mod optim;
pub mod params;
pub mod preprocess;
pub mod quantizer;
pub mod real;
pub mod rng;
pub mod signal;
pub mod tensor;
pub mod vqvae;

pub use autograd::{Activation, Graph, Var};
pub use error::{Error, Result};
pub use params::{ParamId, ParamStore, Parameter};
pub use real::{DType, Real};
pub use tensor::Tensor;

/// Whether a forward pass trains (batch statistics, dropout) or infers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}
