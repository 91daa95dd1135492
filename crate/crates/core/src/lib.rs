//! Core algorithms for uncertainty-aware two-stage sequence labeling.
//!
//! A variational BiLSTM tagger produces draft labels together with the
//! entropy of its Monte-Carlo averaged predictive distribution. A two-stream
//! relative-position self-attention refiner re-predicts every position from
//! words and draft labels in parallel, and the threshold decoder keeps the
//! refined label only where the draft was uncertain.
//!
//! The crate is `no_std` (with `alloc`): file IO, timing and the command line
//! live in the companion `uanet` crate.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod autodiff;
pub mod data;
pub mod decode;
pub mod encoder;
pub mod error;
pub mod model;
pub mod eval;
pub mod gradcheck;
pub mod params;
pub mod refiner;
pub mod rng;
pub mod tensor;
pub mod train;

pub use autodiff::{Tape, Var};
pub use error::{Error, Result};
pub use params::{Graph, ParamId, ParamStore};
pub use tensor::Tensor;
