//! Word-level tokenizer over a fixed vocabulary.
//!
//! Text is split on whitespace, with the punctuation characters `? : . , !`
//! broken out as standalone tokens. Detokenization joins tokens with single
//! spaces, so any canonical text (single-space separated vocabulary words)
//! round-trips exactly. Unknown words map to `<unk>`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

const PUNCT: [char; 5] = ['?', ':', '.', ',', '!'];

pub const MAX_VOCAB: usize = 4096;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary too large: {0} symbols (max {MAX_VOCAB})")]
    VocabTooLarge(usize),
    #[error("duplicate symbol in vocabulary: {0:?}")]
    DuplicateSymbol(String),
    #[error("token id {0} out of range (vocab size {1})")]
    IdOutOfRange(u32, usize),
    #[error("tokenizer io: {0}")]
    Io(#[from] std::io::Error),
    #[error("tokenizer file malformed: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Tokenizer {
    symbols: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Tokenizer {
    /// Builds a tokenizer from the distinct words of `texts`.
    /// Special symbols occupy the first four ids, then words in sorted order.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Result<Self, TokenizerError> {
        let mut words: Vec<String> = Vec::new();
        for t in texts {
            for w in split_words(t) {
                words.push(w);
            }
        }
        words.sort();
        words.dedup();
        let mut symbols = vec![BOS.to_string(), EOS.to_string(), PAD.to_string(), UNK.to_string()];
        symbols.extend(words.into_iter().filter(|w| !is_special(w)));
        Self::from_symbols(symbols)
    }

    pub fn from_symbols(symbols: Vec<String>) -> Result<Self, TokenizerError> {
        if symbols.len() > MAX_VOCAB {
            return Err(TokenizerError::VocabTooLarge(symbols.len()));
        }
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i as u32).is_some() {
                return Err(TokenizerError::DuplicateSymbol(s.clone()));
            }
        }
        Ok(Self { symbols, index })
    }

    pub fn vocab_size(&self) -> usize {
        self.symbols.len()
    }

    pub fn bos_id(&self) -> u32 {
        0
    }

    pub fn eos_id(&self) -> u32 {
        1
    }

    pub fn pad_id(&self) -> u32 {
        2
    }

    pub fn unk_id(&self) -> u32 {
        3
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn id_of(&self, symbol: &str) -> Option<u32> {
        self.index.get(symbol).copied()
    }

    /// Unknown words map to the `<unk>` id; never fails.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        split_words(text)
            .into_iter()
            .map(|w| self.index.get(&w).copied().unwrap_or_else(|| self.unk_id()))
            .collect()
    }

    pub fn detokenize(&self, ids: &[u32]) -> Result<String, TokenizerError> {
        let mut parts = Vec::with_capacity(ids.len());
        for &id in ids {
            let sym = self
                .symbols
                .get(id as usize)
                .ok_or(TokenizerError::IdOutOfRange(id, self.symbols.len()))?;
            parts.push(sym.as_str());
        }
        Ok(parts.join(" "))
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        let json = serde_json::to_string_pretty(&self.symbols)
            .map_err(|e| TokenizerError::Malformed(e.to_string()))?;
        crate::fsutil::write_atomic(path, json.as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let raw = std::fs::read_to_string(path)?;
        let symbols: Vec<String> =
            serde_json::from_str(&raw).map_err(|e| TokenizerError::Malformed(e.to_string()))?;
        Self::from_symbols(symbols)
    }
}

fn is_special(w: &str) -> bool {
    matches!(w, BOS | EOS | PAD | UNK)
}

fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut cur = String::new();
        for ch in chunk.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tok() -> Tokenizer {
        Tokenizer::from_texts(["the color of obj1 is red ?"]).unwrap()
    }

    #[test]
    fn empty_text_round_trips() {
        let t = tok();
        let ids = t.tokenize("");
        assert!(ids.is_empty());
        assert_eq!(t.detokenize(&ids).unwrap(), "");
    }

    #[test]
    fn in_vocab_round_trip_is_exact() {
        let t = tok();
        let s = "the color of obj1 is red ?";
        assert_eq!(t.detokenize(&t.tokenize(s)).unwrap(), s);
    }

    #[test]
    fn unknown_word_maps_to_unk() {
        let t = tok();
        let ids = t.tokenize("the zebra");
        assert_eq!(ids[1], t.unk_id());
    }

    #[test]
    fn punctuation_splits_off() {
        let t = tok();
        assert_eq!(t.tokenize("red?"), t.tokenize("red ?"));
    }

    #[test]
    fn ids_are_bijective_over_symbols() {
        let t = tok();
        for (i, s) in t.symbols().iter().enumerate() {
            assert_eq!(t.id_of(s), Some(i as u32));
        }
    }

    #[test]
    fn out_of_range_id_is_an_error() {
        let t = tok();
        assert!(t.detokenize(&[9999]).is_err());
    }
}
