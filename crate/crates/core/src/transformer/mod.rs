//! Causal and bidirectional transformer language models.
//!
//! Training goes through [`TransformerModel::forward_graph`]; inference uses
//! the tape-free [`TransformerModel::forward_hidden`] and, for causal models,
//! [`TransformerModel::forward_cached`].

mod cache;
mod config;
pub mod gradcheck;
mod model;

pub use cache::{KvCache, LayerKv};
pub use config::{AttentionMode, ModelConfig};
pub use model::{Block, GraphForward, TransformerModel, INIT_STD};
