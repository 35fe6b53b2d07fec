//! Whitespace tokenizer over a closed synthetic vocabulary.
//!
//! Four ids are reserved (pad/bos/eos/unk); everything else maps one
//! word to one token. Unknown words fall back to `UNK`, which keeps
//! encoding total but makes subject-span location fail loudly upstream
//! when a prompt strays outside the vocabulary.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const UNK: TokenId = 3;

/// Number of reserved special ids.
pub const SPECIALS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Tokenizer {
    /// Builds a tokenizer from a word inventory (deduplicated, sorted, so
    /// the id assignment is independent of input order).
    pub fn from_words<I, S>(words: I) -> Tokenizer
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut words: Vec<String> = words.into_iter().map(Into::into).collect();
        words.sort();
        words.dedup();
        let mut t = Tokenizer {
            words,
            index: HashMap::new(),
        };
        t.rebuild_index();
        t
    }

    pub(crate) fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), (i + SPECIALS) as TokenId))
            .collect();
    }

    pub fn vocab_size(&self) -> usize {
        SPECIALS + self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    /// Whitespace-splits and maps each word; unknown words become UNK.
    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace()
            .map(|w| self.index.get(w).copied().unwrap_or(UNK))
            .collect()
    }

    /// BOS followed by the encoded text; the standard prompt layout.
    pub fn encode_prompt(&self, text: &str) -> Vec<TokenId> {
        let mut out = vec![BOS];
        out.extend(self.encode(text));
        out
    }

    pub fn word(&self, id: TokenId) -> Option<&str> {
        match id {
            PAD => Some("<pad>"),
            BOS => Some("<bos>"),
            EOS => Some("<eos>"),
            UNK => Some("<unk>"),
            _ => self.words.get(id as usize - SPECIALS).map(String::as_str),
        }
    }

    /// Space-joins content words, skipping specials.
    pub fn decode(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .filter(|&&t| t >= SPECIALS as TokenId)
            .filter_map(|&t| self.word(t))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

/// Start index of the LAST occurrence of `needle` inside `haystack`.
pub fn find_last_subsequence(haystack: &[TokenId], needle: &[TokenId]) -> Option<usize> {
    if needle.is_empty() || needle.len() > haystack.len() {
        return None;
    }
    (0..=haystack.len() - needle.len())
        .rev()
        .find(|&start| &haystack[start..start + needle.len()] == needle)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> Tokenizer {
        Tokenizer::from_words(["the", "language", "of", "correo", "is", "spanish"])
    }

    #[test]
    fn ids_are_stable_and_sorted() {
        let a = toy();
        let b = Tokenizer::from_words(["spanish", "is", "correo", "of", "language", "the", "the"]);
        assert_eq!(a, b);
        assert_eq!(a.vocab_size(), SPECIALS + 6);
    }

    #[test]
    fn encode_round_trip() {
        let t = toy();
        let ids = t.encode("the language of correo is");
        assert_eq!(t.decode(&ids), "the language of correo is");
    }

    #[test]
    fn unknown_maps_to_unk() {
        let t = toy();
        assert_eq!(t.encode("french")[0], UNK);
    }

    #[test]
    fn prompt_has_bos() {
        let t = toy();
        let ids = t.encode_prompt("the language");
        assert_eq!(ids[0], BOS);
        assert_eq!(ids.len(), 3);
    }

    #[test]
    fn last_subsequence_found() {
        let hay = [1, 5, 6, 5, 6, 7];
        assert_eq!(find_last_subsequence(&hay, &[5, 6]), Some(3));
        assert_eq!(find_last_subsequence(&hay, &[7]), Some(5));
        assert_eq!(find_last_subsequence(&hay, &[9]), None);
        assert_eq!(find_last_subsequence(&hay, &[]), None);
    }
}
