//! TOML run configuration. Every section is optional; missing fields take
//! library defaults and command-line flags override whatever is loaded.

use std::path::Path;

use anyhow::Context;
use serde::{Deserialize, Serialize};

use maria_core::eval::{BenchConfig, EloConfig, ProbeConfig, DEFAULT_RATES};
use maria_core::inference::AnnealSchedule;
use maria_core::training::TrainConfig;
use maria_core::transformer::{AttentionMode, ModelConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub model: ModelShape,
    /// base-model training (train-ar, train-mlm)
    pub train: TrainConfig,
    /// fusion-head training
    pub fusion: TrainConfig,
    pub corpus: CorpusConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub elo: EloConfig,
    pub probe: ProbeConfig,
    pub anneal: AnnealSchedule,
}

/// Architecture fields of [`ModelConfig`]; the attention mode comes from the
/// subcommand.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelShape {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_seq_len: usize,
    pub ffn_mult: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        let c = ModelConfig::ar();
        ModelShape {
            d_model: c.d_model,
            n_layers: c.n_layers,
            n_heads: c.n_heads,
            max_seq_len: c.max_seq_len,
            ffn_mult: c.ffn_mult,
        }
    }
}

impl ModelShape {
    pub fn to_config(&self, attention: AttentionMode) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            n_layers: self.n_layers,
            n_heads: self.n_heads,
            max_seq_len: self.max_seq_len,
            ffn_mult: self.ffn_mult,
            ..ModelConfig::new(attention)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub holdout_frac: f64,
    pub split_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            holdout_frac: 0.01,
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub rates: Vec<f64>,
    /// holdout windows scored per rate
    pub windows: usize,
    pub seed: u64,
    /// window for the rolling method; 0 means the AR model's max_seq_len
    pub rolling_window: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            rates: DEFAULT_RATES.to_vec(),
            windows: 100,
            seed: 0,
            rolling_window: 0,
        }
    }
}

pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
    let Some(path) = path else {
        return Ok(FileConfig::default());
    };
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let cfg: FileConfig = toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    Ok(cfg)
}
