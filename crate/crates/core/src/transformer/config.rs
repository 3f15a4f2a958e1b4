use serde::{Deserialize, Serialize};

use crate::data::tokenizer::VOCAB_SIZE;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub attention: AttentionMode,
    pub ffn_mult: usize,
}

impl ModelConfig {
    /// Desk-scale default: 2 layers, width 64, 4 heads, 128 positions.
    pub fn new(attention: AttentionMode) -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            max_seq_len: 128,
            attention,
            ffn_mult: 4,
        }
    }

    pub fn ar() -> Self {
        Self::new(AttentionMode::Causal)
    }

    pub fn mlm() -> Self {
        Self::new(AttentionMode::Bidirectional)
    }

    pub fn is_causal(&self) -> bool {
        self.attention == AttentionMode::Causal
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn ffn_dim(&self) -> usize {
        self.d_model * self.ffn_mult
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::config("vocab_size", "must be at least 4"));
        }
        if self.d_model == 0 {
            return Err(Error::config("d_model", "must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::config(
                "n_heads",
                format!("must divide d_model ({}), got {}", self.d_model, self.n_heads),
            ));
        }
        if self.max_seq_len < 2 {
            return Err(Error::config("max_seq_len", "must be at least 2"));
        }
        if self.ffn_mult == 0 {
            return Err(Error::config("ffn_mult", "must be positive"));
        }
        Ok(())
    }
}
