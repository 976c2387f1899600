//! Whitespace tokenizer with a frequency-capped vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const CLS: TokenId = 1;
pub const SEP: TokenId = 2;
pub const UNK: TokenId = 3;
pub const BOS: TokenId = 4;
pub const EOS: TokenId = 5;

const RESERVED: [&str; 6] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]", "[BOS]", "[EOS]"];

pub fn is_reserved(id: TokenId) -> bool {
    (id as usize) < RESERVED.len()
}

/// Lowercases and splits on whitespace.
pub fn normalize(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_lowercase()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocab {
    /// Builds a vocabulary from `texts`, keeping at most `max_size` entries
    /// (reserved tokens included). Words are ranked by frequency, then
    /// lexicographically, so the result does not depend on input order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, max_size: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for t in texts {
            for w in normalize(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !RESERVED.contains(&w.as_str()))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let budget = max_size.saturating_sub(RESERVED.len());
        let words = RESERVED
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().take(budget).map(|(w, _)| w))
            .collect();
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
        Self { words, index }
    }

    /// Restores the lookup table after deserialization.
    pub fn reindex(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as TokenId)).collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> TokenId {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: TokenId) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or("[UNK]")
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        normalize(text).iter().map(|w| self.id(w)).collect()
    }

    /// Joins non-reserved tokens with single spaces; stops at EOS.
    pub fn decode(&self, ids: &[TokenId]) -> String {
        ids.iter()
            .take_while(|&&t| t != EOS)
            .filter(|&&t| !is_reserved(t) || t == UNK)
            .map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
