//! Tokenization and the token vocabulary.
//!
//! Lowercased, split on whitespace and punctuation (punctuation marks
//! become their own tokens). Reserved tokens occupy fixed indices so
//! checkpoints stay stable.

use std::collections::HashMap;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;
pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Deterministic lowercase word/punctuation tokenizer.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            for lc in ch.to_lowercase() {
                word.push(lc);
            }
        } else {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            if !ch.is_whitespace() {
                out.push(ch.to_string());
            }
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Token <-> index map with reserved PAD/UNK/BOS/EOS slots.
#[derive(Debug, Clone)]
pub struct TokenVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for TokenVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl TokenVocab {
    pub fn new() -> Self {
        let mut v = Self { tokens: Vec::new(), index: HashMap::new() };
        for t in RESERVED {
            v.insert(t);
        }
        v
    }

    fn insert(&mut self, token: &str) -> usize {
        if let Some(&i) = self.index.get(token) {
            return i;
        }
        let i = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), i);
        i
    }

    /// Build from a corpus of texts, indices in first-appearance order
    /// after the reserved slots.
    pub fn build(corpus: impl IntoIterator<Item = impl AsRef<str>>) -> Self {
        let mut v = Self::new();
        for text in corpus {
            for tok in tokenize(text.as_ref()) {
                v.insert(&tok);
            }
        }
        v
    }

    /// Rebuild from an explicit token list (checkpoint loading).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            index.insert(t.clone(), i);
        }
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn lookup(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Tokenize and map to indices, OOV becoming UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        tokenize(text).iter().map(|t| self.lookup(t).unwrap_or(UNK) as u32).collect()
    }

    /// Indices back to a space-joined string, skipping reserved tokens.
    pub fn decode(&self, ids: &[u32]) -> String {
        let words: Vec<&str> =
            ids.iter().map(|&i| i as usize).filter(|&i| i >= RESERVED.len()).map(|i| self.token(i)).collect();
        words.join(" ")
    }

    pub fn content_hash(&self) -> String {
        use sha2::{Digest, Sha256};
        use std::fmt::Write as _;
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let mut out = String::with_capacity(64);
        for b in h.finalize() {
            let _ = write!(out, "{b:02x}");
        }
        out
    }
}
