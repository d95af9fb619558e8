//! Negative attention scores for binary-decision transformers.
//!
//! The crate contains a small decoder-only transformer with inspectable
//! attention, the Negative Attention Score (NAS) per head, negative-head
//! probing, head-wise incremental debiasing with early stopping, update
//! cancellation and early halting, plus the evaluation metrics used to
//! measure precision/recall imbalance. It is `no_std` (with `alloc`); file
//! formats and the command line live in the `ablb` crate.

#![no_std]

extern crate alloc;

pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod model;
pub mod nas;
pub mod probing;
pub mod sample;
pub mod scalar;
pub mod train;
pub mod tuner;
pub mod vocab;

pub use config::ModelConfig;
pub use error::{Error, Result};
pub use model::ModelState;
pub use sample::{BinarySample, HeadId, HeadScore, Label, Origin};
