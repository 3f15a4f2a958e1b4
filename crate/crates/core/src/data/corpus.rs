//! Corpus ingestion: concatenate files, cut fixed-length windows, and assign
//! each window to train or holdout by a seeded content hash.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::tokenizer::{ByteTokenizer, TokenId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Holdout,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub tokens: Vec<TokenId>,
    /// index into [`CorpusShards::sources`] of the file the window starts in
    pub source: usize,
    /// byte offset within that file
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusShards {
    pub window_len: usize,
    pub sources: Vec<PathBuf>,
    pub train: Vec<Window>,
    pub holdout: Vec<Window>,
}

impl CorpusShards {
    pub fn len(&self) -> usize {
        self.train.len() + self.holdout.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn total_tokens(&self) -> usize {
        self.len() * self.window_len
    }
}

/// Hash bucket in `[0, 1)` for a window's content under `seed`.
pub fn window_bucket(tokens: &[TokenId], seed: u64) -> f64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    for t in tokens {
        h.update(t.to_le_bytes());
    }
    let digest = h.finalize();
    let mut first = [0u8; 8];
    first.copy_from_slice(&digest[..8]);
    (u64::from_le_bytes(first) >> 11) as f64 / (1u64 << 53) as f64
}

pub fn split_of(tokens: &[TokenId], holdout_frac: f64, seed: u64) -> Split {
    if window_bucket(tokens, seed) < holdout_frac {
        Split::Holdout
    } else {
        Split::Train
    }
}

/// Reads and concatenates `paths`, then windows the byte stream.
pub fn load_corpus<P: AsRef<Path>>(
    paths: &[P],
    window_len: usize,
    holdout_frac: f64,
    seed: u64,
) -> Result<CorpusShards> {
    let mut stream: Vec<TokenId> = Vec::new();
    let mut starts = Vec::new();
    for p in paths {
        let bytes = std::fs::read(p.as_ref())?;
        starts.push(stream.len());
        stream.extend(ByteTokenizer.encode_bytes(&bytes));
    }
    let sources = paths.iter().map(|p| p.as_ref().to_path_buf()).collect();
    shard_stream(&stream, &starts, sources, window_len, holdout_frac, seed)
}

/// In-memory variant of [`load_corpus`] for a single text.
pub fn corpus_from_text(text: &str, window_len: usize, holdout_frac: f64, seed: u64) -> Result<CorpusShards> {
    let stream = ByteTokenizer.encode(text);
    shard_stream(&stream, &[0], vec![PathBuf::from("<memory>")], window_len, holdout_frac, seed)
}

fn shard_stream(
    stream: &[TokenId],
    starts: &[usize],
    sources: Vec<PathBuf>,
    window_len: usize,
    holdout_frac: f64,
    seed: u64,
) -> Result<CorpusShards> {
    if window_len == 0 {
        return Err(Error::config("window_len", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&holdout_frac) {
        return Err(Error::config("holdout_frac", "must lie in [0, 1]"));
    }
    if stream.len() < window_len {
        return Err(Error::Data(format!(
            "corpus has {} tokens, fewer than one window of {window_len}",
            stream.len()
        )));
    }
    let mut train = Vec::new();
    let mut holdout = Vec::new();
    for w in 0..stream.len() / window_len {
        let start = w * window_len;
        let tokens = stream[start..start + window_len].to_vec();
        let source = starts.partition_point(|&s| s <= start).saturating_sub(1);
        let window = Window {
            offset: start - starts[source],
            source,
            tokens,
        };
        match split_of(&window.tokens, holdout_frac, seed) {
            Split::Train => train.push(window),
            Split::Holdout => holdout.push(window),
        }
    }
    Ok(CorpusShards {
        window_len,
        sources,
        train,
        holdout,
    })
}
