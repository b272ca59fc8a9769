//! Canonical dialogue data model.
//!
//! A [`Dialogue`] is a strictly alternating USER/SYSTEM utterance list that
//! starts with the user and ends with the system, so that the `i`-th system
//! turn always answers the `i`-th user turn. Raw data that violates this is
//! repaired by [`Dialogue::normalize`].

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};

/// Role token prepended to every user turn.
pub const USER_TOKEN: &str = "[USR]";
/// Role token prepended to every system turn.
pub const SYSTEM_TOKEN: &str = "[SYS]";
/// Text of the synthetic user turn inserted before a leading system turn.
pub const NO_INPUT: &str = "[no input]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    System,
}

impl Role {
    pub fn token(self) -> &'static str {
        match self {
            Role::User => USER_TOKEN,
            Role::System => SYSTEM_TOKEN,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::User => "user",
            Role::System => "system",
        })
    }
}

/// Whether a turn comes from the source data or was produced by the LLM.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    #[default]
    Original,
    Generated,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Utterance {
    pub role: Role,
    pub text: String,
    #[serde(default)]
    pub origin: Origin,
}

impl Utterance {
    pub fn new(role: Role, text: impl Into<String>) -> Self {
        Self { role, text: text.into(), origin: Origin::Original }
    }

    pub fn user(text: impl Into<String>) -> Self {
        Self::new(Role::User, text)
    }

    pub fn system(text: impl Into<String>) -> Self {
        Self::new(Role::System, text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CorpusError {
    #[error("dialogue {id}: no turns left after normalization")]
    EmptyAfterNormalization { id: String },
    #[error("dialogue {id}: {reason}")]
    InvalidDialogue { id: String, reason: String },
    #[error("duplicate dialogue id {0}")]
    DuplicateId(String),
    #[error("malformed serialized dialogue: {0}")]
    MalformedSerialization(String),
}

/// An alternating USER/SYSTEM dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawDialogue", into = "RawDialogue")]
pub struct Dialogue {
    id: String,
    source_dataset: String,
    domains: Vec<String>,
    turns: Vec<Utterance>,
}

/// Wire form of a dialogue line, validated on the way in.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDialogue {
    id: String,
    dataset: String,
    #[serde(default)]
    domains: Vec<String>,
    turns: Vec<Utterance>,
}

impl TryFrom<RawDialogue> for Dialogue {
    type Error = CorpusError;

    fn try_from(raw: RawDialogue) -> Result<Self, Self::Error> {
        Dialogue::new(raw.id, raw.dataset, raw.domains, raw.turns)
    }
}

impl From<Dialogue> for RawDialogue {
    fn from(d: Dialogue) -> Self {
        RawDialogue { id: d.id, dataset: d.source_dataset, domains: d.domains, turns: d.turns }
    }
}

impl Dialogue {
    /// Builds a dialogue, rejecting anything that is not already alternating.
    pub fn new(
        id: impl Into<String>,
        source_dataset: impl Into<String>,
        domains: Vec<String>,
        turns: Vec<Utterance>,
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let invalid = |reason: String| CorpusError::InvalidDialogue { id: id.clone(), reason };
        if turns.len() < 2 || turns.len() % 2 != 0 {
            return Err(invalid(format!("expected an even number (>= 2) of turns, got {}", turns.len())));
        }
        for (i, turn) in turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Role::User } else { Role::System };
            if turn.role != expected {
                return Err(invalid(format!("turn {i} should be {expected}, found {}", turn.role)));
            }
            if turn.text.trim().is_empty() {
                return Err(invalid(format!("turn {i} has empty text")));
            }
        }
        Ok(Self { id, source_dataset: source_dataset.into(), domains, turns })
    }

    /// Repairs a raw turn list into an alternating dialogue.
    ///
    /// Blank utterances are dropped, consecutive same-role utterances are
    /// merged with a single space, a leading system turn gets a synthetic
    /// `"[no input]"` user turn in front of it and a trailing user turn is
    /// dropped.
    pub fn normalize<S: AsRef<str>>(
        id: impl Into<String>,
        source_dataset: impl Into<String>,
        domains: Vec<String>,
        raw_turns: &[(Role, S)],
    ) -> Result<Self, CorpusError> {
        let id = id.into();
        let mut turns: Vec<Utterance> = Vec::with_capacity(raw_turns.len() + 1);
        for (role, text) in raw_turns {
            let text = text.as_ref().trim();
            if text.is_empty() {
                continue;
            }
            match turns.last_mut() {
                Some(last) if last.role == *role => {
                    last.text.push(' ');
                    last.text.push_str(text);
                }
                _ => turns.push(Utterance::new(*role, text)),
            }
        }
        if turns.first().is_some_and(|t| t.role == Role::System) {
            turns.insert(0, Utterance::user(NO_INPUT));
        }
        if turns.last().is_some_and(|t| t.role == Role::User) {
            turns.pop();
        }
        if turns.is_empty() {
            return Err(CorpusError::EmptyAfterNormalization { id });
        }
        Self::new(id, source_dataset, domains, turns)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn source_dataset(&self) -> &str {
        &self.source_dataset
    }

    pub fn domains(&self) -> &[String] {
        &self.domains
    }

    pub fn turns(&self) -> &[Utterance] {
        &self.turns
    }

    /// Number of system turns (`n`).
    pub fn num_system_turns(&self) -> usize {
        self.turns.len() / 2
    }

    /// The `ordinal`-th (1-based) system turn.
    pub fn system_turn(&self, ordinal: usize) -> Option<&Utterance> {
        ordinal.checked_sub(1).and_then(|i| self.turns.get(2 * i + 1))
    }

    /// Returns a copy with the `ordinal`-th system turn replaced.
    pub fn with_system_turn(&self, ordinal: usize, text: impl Into<String>, origin: Origin) -> Result<Self, CorpusError> {
        let text = text.into();
        if ordinal == 0 || ordinal > self.num_system_turns() {
            return Err(CorpusError::InvalidDialogue {
                id: self.id.clone(),
                reason: format!("system turn {ordinal} out of range 1..={}", self.num_system_turns()),
            });
        }
        if text.trim().is_empty() {
            return Err(CorpusError::InvalidDialogue { id: self.id.clone(), reason: "replacement text is empty".into() });
        }
        let mut out = self.clone();
        let turn = &mut out.turns[2 * (ordinal - 1) + 1];
        turn.text = text;
        turn.origin = origin;
        Ok(out)
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
    }

    /// Same role/text sequence, ignoring ids and origins.
    pub fn same_text(&self, other: &Dialogue) -> bool {
        self.turns.len() == other.turns.len()
            && self.turns.iter().zip(&other.turns).all(|(a, b)| a.role == b.role && a.text == b.text)
    }

    pub fn serialize(&self) -> SerializedDialogue {
        SerializedDialogue::from_turns(&self.turns)
    }

    /// Rebuilds a dialogue from its serialized form plus the header fields
    /// that serialization does not carry.
    pub fn from_serialized(
        id: impl Into<String>,
        source_dataset: impl Into<String>,
        domains: Vec<String>,
        serialized: &SerializedDialogue,
    ) -> Result<Self, CorpusError> {
        let turns = serialized.turns()?;
        Self::new(id, source_dataset, domains, turns)
    }
}

/// Location of one turn inside a [`SerializedDialogue`]. Offsets are byte
/// offsets into the serialized text; `end` is exclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnSpan {
    pub turn_index: usize,
    pub start: usize,
    pub end: usize,
}

/// `"[USR] hi [SYS] hello"` plus the spans that partition it by turn.
///
/// Each span covers the role token, one space, the text and, for every turn
/// but the last, the single separating space.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SerializedDialogue {
    pub text: String,
    pub boundaries: Vec<TurnSpan>,
}

impl SerializedDialogue {
    pub fn from_turns(turns: &[Utterance]) -> Self {
        let mut text = String::new();
        let mut boundaries = Vec::with_capacity(turns.len());
        for (i, turn) in turns.iter().enumerate() {
            if let Some(prev) = boundaries.last_mut() {
                // the separator belongs to the previous span
                text.push(' ');
                let prev: &mut TurnSpan = prev;
                prev.end = text.len();
            }
            let start = text.len();
            text.push_str(turn.role.token());
            text.push(' ');
            text.push_str(&turn.text);
            boundaries.push(TurnSpan { turn_index: i, start, end: text.len() });
        }
        Self { text, boundaries }
    }

    /// Recovers the turn list. Origins are not serialized and come back as
    /// [`Origin::Original`].
    pub fn turns(&self) -> Result<Vec<Utterance>, CorpusError> {
        let malformed = |m: String| CorpusError::MalformedSerialization(m);
        let mut expected_start = 0;
        let mut out = Vec::with_capacity(self.boundaries.len());
        for (i, span) in self.boundaries.iter().enumerate() {
            if span.turn_index != i || span.start != expected_start || span.end < span.start {
                return Err(malformed(format!("span {i} does not continue the partition")));
            }
            let segment = self
                .text
                .get(span.start..span.end)
                .ok_or_else(|| malformed(format!("span {i} out of bounds")))?;
            let last = i + 1 == self.boundaries.len();
            let segment = if last {
                segment
            } else {
                segment.strip_suffix(' ').ok_or_else(|| malformed(format!("span {i} lacks a separator")))?
            };
            let (role, rest) = if let Some(rest) = segment.strip_prefix(USER_TOKEN) {
                (Role::User, rest)
            } else if let Some(rest) = segment.strip_prefix(SYSTEM_TOKEN) {
                (Role::System, rest)
            } else {
                return Err(malformed(format!("span {i} has no role token")));
            };
            let text = rest.strip_prefix(' ').ok_or_else(|| malformed(format!("span {i} lacks a space after the role token")))?;
            out.push(Utterance::new(role, text.to_string()));
            expected_start = span.end;
        }
        if expected_start != self.text.len() {
            return Err(malformed("spans do not cover the whole text".into()));
        }
        Ok(out)
    }
}

/// A set of dialogues with unique ids plus free-form metadata.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Corpus {
    dialogues: Vec<Dialogue>,
    pub meta: BTreeMap<String, String>,
}

impl Corpus {
    pub fn new(dialogues: Vec<Dialogue>) -> Result<Self, CorpusError> {
        let mut seen = BTreeSet::new();
        for d in &dialogues {
            if !seen.insert(d.id()) {
                return Err(CorpusError::DuplicateId(d.id().to_string()));
            }
        }
        Ok(Self { dialogues, meta: BTreeMap::new() })
    }

    pub fn with_meta(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.meta.insert(key.into(), value.into());
        self
    }

    pub fn dialogues(&self) -> &[Dialogue] {
        &self.dialogues
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&Dialogue> {
        self.dialogues.iter().find(|d| d.id() == id)
    }

    pub fn into_dialogues(self) -> Vec<Dialogue> {
        self.dialogues
    }
}
