//! Byte tokenizer, corpus sharding, checkpoints and a synthetic corpus.

pub mod checkpoint;
pub mod corpus;
pub mod synth;
pub mod tokenizer;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointKind, ToCheckpoint};
pub use corpus::{corpus_from_text, load_corpus, CorpusShards, Split, Window};
pub use tokenizer::{ByteTokenizer, TokenId, BOS, BYTE_VOCAB, EOS, MASK, PAD, VOCAB_SIZE};
