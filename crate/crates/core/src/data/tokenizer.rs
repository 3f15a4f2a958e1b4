//! Byte-level tokenizer: ids 0–255 are raw bytes, four specials follow.

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const MASK: TokenId = 256;
pub const BOS: TokenId = 257;
pub const PAD: TokenId = 258;
pub const EOS: TokenId = 259;
pub const VOCAB_SIZE: usize = 260;
/// Number of ids that correspond to raw bytes; sampling is restricted to these.
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub fn vocab_size(&self) -> usize {
        VOCAB_SIZE
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_bytes(text.as_bytes())
    }

    pub fn encode_bytes(&self, bytes: &[u8]) -> Vec<TokenId> {
        bytes.iter().map(|&b| b as TokenId).collect()
    }

    /// Strict decode: any special id is an error.
    pub fn decode_bytes(&self, ids: &[TokenId]) -> Result<Vec<u8>> {
        ids.iter()
            .map(|&id| {
                u8::try_from(id).map_err(|_| {
                    Error::contract(format!(
                        "special token {} in strict decode",
                        special_name(id).unwrap_or("<unknown>")
                    ))
                })
            })
            .collect()
    }

    /// Strict decode to text; invalid UTF-8 is replaced.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let bytes = self.decode_bytes(ids)?;
        Ok(String::from_utf8_lossy(&bytes).into_owned())
    }

    /// Renders specials as `[MASK]`, `[BOS]`, `[PAD]`, `[EOS]`.
    pub fn decode_lossy(&self, ids: &[TokenId]) -> String {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            match u8::try_from(id) {
                Ok(b) => out.push(b),
                Err(_) => {
                    out.push(b'[');
                    out.extend_from_slice(special_name(id).unwrap_or("UNK").as_bytes());
                    out.push(b']');
                }
            }
        }
        String::from_utf8_lossy(&out).into_owned()
    }
}

pub fn special_name(id: TokenId) -> Option<&'static str> {
    match id {
        MASK => Some("MASK"),
        BOS => Some("BOS"),
        PAD => Some("PAD"),
        EOS => Some("EOS"),
        _ => None,
    }
}

pub fn is_special(id: TokenId) -> bool {
    id as usize >= BYTE_VOCAB
}
