use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::text;

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const ENCODE: u32 = 2;
pub const BOS: u32 = 3;
pub const EOS: u32 = 4;
pub const UNK: u32 = 5;
/// Separator between linearized triplets.
pub const SEP: u32 = 6;

const SPECIALS: [&str; 7] = ["[PAD]", "[CLS]", "[Encode]", "[BOS]", "[EOS]", "[UNK]", ";"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenMode {
    /// `[CLS] words…`
    EncodeCls,
    /// `[Encode] words…`
    EncodeMatch,
    /// `[BOS] words… [EOS]`
    Decode,
}

/// Word-level vocabulary with fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
    pub max_text_len: usize,
}

impl Tokenizer {
    /// Builds a vocabulary from every word of the given texts, sorted for determinism.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, max_text_len: usize) -> Self {
        let set: BTreeSet<String> = texts.into_iter().flat_map(text::words).collect();
        Self::from_words(set, max_text_len)
    }

    pub fn from_words(words: impl IntoIterator<Item = String>, max_text_len: usize) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for w in words {
            if !all.contains(&w) {
                all.push(w);
            }
        }
        let mut t = Self { words: all, index: HashMap::new(), max_text_len };
        t.rebuild_index();
        t
    }

    /// Restores the lookup table after deserialization.
    pub fn rebuild_index(&mut self) {
        self.index = self.words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.index.get(word).copied()
    }

    pub fn id_or_unk(&self, word: &str) -> u32 {
        self.id(word).unwrap_or(UNK)
    }

    pub fn word(&self, id: u32) -> &str {
        self.words.get(id as usize).map(String::as_str).unwrap_or("[UNK]")
    }

    pub fn is_special(id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// Ids of the normalized words of `text`, no specials, no padding.
    pub fn encode_words(&self, text: &str) -> Vec<u32> {
        text::words(text).iter().map(|w| self.id_or_unk(w)).collect()
    }

    /// Token ids padded or truncated to `max_text_len`.
    pub fn tokenize(&self, text: &str, mode: TokenMode) -> Vec<u32> {
        let mut ids = self.tokenize_unpadded(text, mode);
        ids.resize(self.max_text_len, PAD);
        ids
    }

    /// Like [`Tokenizer::tokenize`] without trailing padding. Decode mode keeps
    /// `[EOS]` when the text is truncated.
    pub fn tokenize_unpadded(&self, text: &str, mode: TokenMode) -> Vec<u32> {
        let body = self.encode_words(text);
        let cap = self.max_text_len;
        let mut ids = Vec::with_capacity(cap);
        match mode {
            TokenMode::EncodeCls | TokenMode::EncodeMatch => {
                ids.push(if mode == TokenMode::EncodeCls { CLS } else { ENCODE });
                ids.extend(body.iter().take(cap.saturating_sub(1)));
            }
            TokenMode::Decode => {
                ids.push(BOS);
                ids.extend(body.iter().take(cap.saturating_sub(2)));
                ids.push(EOS);
            }
        }
        ids.truncate(cap);
        ids
    }

    /// Words up to the first `[EOS]`, specials removed.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .take_while(|&&id| id != EOS)
            .filter(|&&id| !Self::is_special(id) || id == SEP)
            .map(|&id| self.word(id))
            .collect::<Vec<_>>()
            .join(" ")
    }
}
