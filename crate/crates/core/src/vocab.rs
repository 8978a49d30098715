//! Token and character vocabularies with a reserved UNK slot.
//!
//! Embedding tables built against these vocabularies have `len() + 1` rows;
//! the final row is the trainable UNK embedding, so lookups never fail.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct WordVocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl WordVocab {
    pub fn build<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = WordVocab::default();
        for t in tokens {
            v.intern(t);
        }
        v
    }

    pub fn intern(&mut self, token: &str) -> usize {
        if let Some(&id) = self.index.get(token) {
            return id;
        }
        let id = self.tokens.len();
        self.tokens.push(token.to_string());
        self.index.insert(token.to_string(), id);
        id
    }

    /// Rebuild the lookup map after deserialization.
    pub fn reindex(&mut self) {
        self.index = self
            .tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(self.tokens.len())
    }

    pub fn unk_id(&self) -> usize {
        self.tokens.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Rows an embedding table over this vocabulary needs (UNK included).
    pub fn table_rows(&self) -> usize {
        self.tokens.len() + 1
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct CharVocab {
    chars: Vec<char>,
    #[serde(skip)]
    index: HashMap<char, usize>,
}

impl CharVocab {
    /// Case-preserving build from a corpus of strings; capitalization stays
    /// an observable signal.
    pub fn build<'a>(words: impl IntoIterator<Item = &'a str>) -> Self {
        let mut v = CharVocab::default();
        for w in words {
            for c in w.chars() {
                v.intern(c);
            }
        }
        v
    }

    pub fn intern(&mut self, c: char) -> usize {
        if let Some(&id) = self.index.get(&c) {
            return id;
        }
        let id = self.chars.len();
        self.chars.push(c);
        self.index.insert(c, id);
        id
    }

    pub fn reindex(&mut self) {
        self.index = self.chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    }

    pub fn encode(&self, word: &str) -> Vec<usize> {
        word.chars()
            .map(|c| self.index.get(&c).copied().unwrap_or(self.chars.len()))
            .collect()
    }

    pub fn unk_id(&self) -> usize {
        self.chars.len()
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn table_rows(&self) -> usize {
        self.chars.len() + 1
    }

    pub fn chars(&self) -> &[char] {
        &self.chars
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_token_maps_to_unk() {
        let v = WordVocab::build(["the", "cat"]);
        assert_eq!(v.id_or_unk("the"), 0);
        assert_eq!(v.id_or_unk("qwxz"), v.unk_id());
        assert_eq!(v.table_rows(), 3);
    }

    #[test]
    fn chars_preserve_case() {
        let v = CharVocab::build(["Obama"]);
        assert_ne!(v.encode("O"), v.encode("o"));
    }
}
