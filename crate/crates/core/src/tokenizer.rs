//! Word-level vocabulary over [`crate::text::words`] with BERT-style
//! special tokens.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{Role, Utterance};
use crate::text::words;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
pub const SEP: usize = 3;
pub const MASK: usize = 4;
pub const USR: usize = 5;
pub const SYS: usize = 6;

const SPECIALS: [&str; 7] = ["[PAD]", "[UNK]", "[CLS]", "[SEP]", "[MASK]", "[USR]", "[SYS]"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Tokenizer {
    vocab: Vec<String>,
    index: BTreeMap<String, usize>,
}

impl TryFrom<Vec<String>> for Tokenizer {
    type Error = String;

    fn try_from(vocab: Vec<String>) -> Result<Self, Self::Error> {
        if vocab.len() < SPECIALS.len() || vocab.iter().zip(SPECIALS).any(|(a, b)| a != b) {
            return Err("vocabulary must start with the special tokens".to_string());
        }
        let index: BTreeMap<String, usize> = vocab.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        if index.len() != vocab.len() {
            return Err("vocabulary has duplicate entries".to_string());
        }
        Ok(Self { vocab, index })
    }
}

impl From<Tokenizer> for Vec<String> {
    fn from(t: Tokenizer) -> Self {
        t.vocab
    }
}

impl Tokenizer {
    /// Keeps words seen at least `min_freq` times, most frequent first
    /// (ties alphabetical), capped at `max_size` entries including specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize, max_size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> =
            counts.into_iter().filter(|(w, c)| *c >= min_freq && !SPECIALS.contains(&w.as_str())).collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(ranked.into_iter().map(|(w, _)| w).take(max_size.saturating_sub(SPECIALS.len())));
        Self::try_from(vocab).expect("specials are unique and prefixed")
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.vocab.get(id).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Special tokens are never masked or predicted.
    pub fn is_special(id: usize) -> bool {
        id < SPECIALS.len()
    }

    pub const fn num_special() -> usize {
        SPECIALS.len()
    }

    pub fn encode_text(&self, text: &str) -> Vec<usize> {
        words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Role token followed by the utterance's word ids.
    pub fn encode_turn(&self, turn: &Utterance) -> Vec<usize> {
        let mut ids = Vec::new();
        ids.push(match turn.role {
            Role::User => USR,
            Role::System => SYS,
        });
        ids.extend(self.encode_text(&turn.text));
        ids
    }

    /// `[CLS] turn... [SEP]` within `max_len`, dropping the oldest turns
    /// first. Never keeps fewer than `min(2, turns)` turns; returns `None`
    /// when even those do not fit.
    pub fn encode_turns(&self, turns: &[Utterance], max_len: usize) -> Option<Vec<usize>> {
        let encoded: Vec<Vec<usize>> = turns.iter().map(|t| self.encode_turn(t)).collect();
        let min_keep = encoded.len().min(2);
        let mut start = 0;
        let mut total: usize = 2 + encoded.iter().map(Vec::len).sum::<usize>();
        while total > max_len && encoded.len() - start > min_keep {
            total -= encoded[start].len();
            start += 1;
        }
        if total > max_len {
            return None;
        }
        let mut ids = Vec::with_capacity(total);
        ids.push(CLS);
        for e in &encoded[start..] {
            ids.extend_from_slice(e);
        }
        ids.push(SEP);
        Some(ids)
    }

    /// Like [`Tokenizer::encode_turns`] but always succeeds: when the most
    /// recent turns still do not fit, the sequence is cut at `max_len`.
    pub fn encode_turns_truncating(&self, turns: &[Utterance], max_len: usize) -> Vec<usize> {
        if let Some(ids) = self.encode_turns(turns, max_len) {
            return ids;
        }
        let last = &turns[turns.len().saturating_sub(1)..];
        let mut ids = Vec::with_capacity(max_len);
        ids.push(CLS);
        for t in last {
            ids.extend(self.encode_turn(t));
        }
        ids.truncate(max_len.saturating_sub(1));
        ids.push(SEP);
        ids
    }

    /// Short digest of the vocabulary, used as the tokenizer identifier.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for w in &self.vocab {
            h.update(w.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        let mut s = String::with_capacity(16);
        for b in &digest[..8] {
            s.push(char::from_digit((b >> 4) as u32, 16).unwrap());
            s.push(char::from_digit((b & 0xf) as u32, 16).unwrap());
        }
        s
    }
}
