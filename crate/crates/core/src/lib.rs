//! Masked infilling with a frozen causal model, a frozen bidirectional model
//! and a trained linear decoder over their concatenated hidden states.
//!
//! Module map:
//!
//! - [`numerics`]: tensors, autodiff tape, Adam
//! - [`transformer`]: causal / bidirectional transformer with KV cache
//! - [`masking`]: mask-rate sampling, mask sets, word masking, conditioning sets
//! - [`fusion`]: the fused decoding head and its loss
//! - [`training`]: training loops for the base models and the head
//! - [`inference`]: cached and uncached infilling, sampling, annealing
//! - [`eval`]: perplexity, throughput, Bradley–Terry ratings, probes
//! - [`data`]: byte tokenizer, corpus sharding, checkpoints, synthetic text

pub mod data;
pub mod error;
pub mod eval;
pub mod fusion;
pub mod inference;
pub mod masking;
pub mod numerics;
pub mod training;
pub mod transformer;

pub use error::{Error, Result};
