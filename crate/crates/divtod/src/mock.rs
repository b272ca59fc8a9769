//! Scripted backend for tests and offline runs.
//!
//! A script is JSONL, one rule per line:
//! `{"match": "substring", "text": "...", "scores": {"True": -0.1}, "once": false, "error": "timeout"}`.
//! The first rule whose `match` occurs in the prompt answers it (a rule
//! without `match` matches everything). `once` rules are consumed on use,
//! which makes an ordered queue. In `text`, `{prompt_hash}` expands to a
//! digest of the backend seed and the prompt.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use divtod_core::gateway::{Backend, Capabilities, CompletionResult, GatewayError, GenerationConfig};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::io::{self, IoError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Rule {
    #[serde(default, rename = "match", skip_serializing_if = "Option::is_none")]
    pub pattern: Option<String>,
    #[serde(default)]
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scores: Option<BTreeMap<String, f64>>,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub once: bool,
    /// `timeout`, `unavailable` or `overflow`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl Rule {
    pub fn text(pattern: Option<&str>, text: &str) -> Self {
        Rule { pattern: pattern.map(str::to_string), text: text.to_string(), scores: None, once: false, error: None }
    }

    pub fn scores(pattern: Option<&str>, scores: &[(&str, f64)]) -> Self {
        Rule { scores: Some(scores.iter().map(|(k, v)| (k.to_string(), *v)).collect()), ..Rule::text(pattern, "") }
    }

    fn matches(&self, prompt: &str) -> bool {
        self.pattern.as_deref().is_none_or(|p| prompt.contains(p))
    }
}

pub struct MockBackend {
    rules: Mutex<Vec<(Rule, bool)>>,
    seed: u64,
    context_limit: Option<usize>,
    hidden_dim: Option<usize>,
    scoring: bool,
}

/// Marker the filter prompt always contains, via its demonstrations.
pub const FILTER_MARKER: &str = "Judgment:";

impl MockBackend {
    pub fn new(rules: Vec<Rule>, seed: u64) -> Self {
        let scoring = rules.iter().any(|r| r.scores.is_some());
        Self { rules: Mutex::new(rules.into_iter().map(|r| (r, false)).collect()), seed, context_limit: None, hidden_dim: None, scoring }
    }

    pub fn from_script(path: &Path, seed: u64) -> Result<Self, IoError> {
        let rules: Vec<Rule> = io::read_jsonl(path)?;
        for (i, r) in rules.iter().enumerate() {
            if let Some(e) = &r.error {
                if parse_error(e, 0).is_none() {
                    return Err(IoError::Parse { path: path.to_path_buf(), line: i + 1, message: format!("unknown error kind {e:?}") });
                }
            }
        }
        Ok(Self::new(rules, seed))
    }

    /// Prompts longer than `limit` characters fail with `ContextOverflow`.
    pub fn with_context_limit(mut self, limit: usize) -> Self {
        self.context_limit = Some(limit);
        self
    }

    /// Enables hashed bag-of-words hidden states of this width.
    pub fn with_hidden_states(mut self, dim: usize) -> Self {
        self.hidden_dim = Some(dim);
        self
    }

    /// Approves every candidate; rewrites carry a prompt digest so they
    /// always differ from the original turn.
    pub fn always_true(seed: u64) -> Self {
        Self::new(vec![Rule::scores(Some(FILTER_MARKER), &[("True", 0.0), ("False", -5.0)]), Rule::text(None, "here is an alternative reply {prompt_hash}")], seed)
    }

    pub fn always_false(seed: u64) -> Self {
        Self::new(vec![Rule::scores(Some(FILTER_MARKER), &[("True", -5.0), ("False", 0.0)]), Rule::text(None, "here is an alternative reply {prompt_hash}")], seed)
    }

    pub fn prompt_hash(&self, prompt: &str) -> String {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update(prompt.as_bytes());
        hex::encode(&h.finalize()[..4])
    }

    fn check(&self, prompt: &str) -> Result<(), GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        match self.context_limit {
            Some(limit) if prompt.chars().count() > limit => Err(GatewayError::ContextOverflow { prompt_len: prompt.chars().count(), limit }),
            _ => Ok(()),
        }
    }

    /// Finds the answering rule; `consume_if` decides whether a `once` rule
    /// is used up by this request.
    fn lookup(&self, prompt: &str, consume_if: impl Fn(&Rule) -> bool) -> Result<Rule, GatewayError> {
        let mut rules = self.rules.lock().expect("mock script lock");
        let Some((rule, used)) = rules.iter_mut().find(|(r, used)| !*used && r.matches(prompt)) else {
            return Err(GatewayError::BackendUnavailable("mock script has no rule for this prompt".into()));
        };
        if rule.once && consume_if(rule) {
            *used = true;
        }
        if let Some(e) = &rule.error {
            return Err(parse_error(e, prompt.chars().count()).expect("validated kind"));
        }
        Ok(rule.clone())
    }
}

fn parse_error(kind: &str, prompt_len: usize) -> Option<GatewayError> {
    match kind {
        "timeout" => Some(GatewayError::Timeout),
        "unavailable" => Some(GatewayError::BackendUnavailable("scripted".into())),
        "overflow" => Some(GatewayError::ContextOverflow { prompt_len, limit: 0 }),
        _ => None,
    }
}

impl Backend for MockBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_first_token_scores: self.scoring, supports_hidden_states: self.hidden_dim.is_some() }
    }

    fn complete(&self, prompt: &str, cfg: &GenerationConfig) -> Result<CompletionResult, GatewayError> {
        cfg.validate()?;
        self.check(prompt)?;
        let rule = self.lookup(prompt, |_| true)?;
        let text = rule.text.replace("{prompt_hash}", &self.prompt_hash(prompt));
        // whitespace-separated words stand in for backend tokens
        let text = truncate_words(&text, cfg.max_new_tokens as usize);
        Ok(CompletionResult { text, first_token_scores: None })
    }

    fn first_token_scores(&self, prompt: &str, candidates: &[&str]) -> Result<Option<BTreeMap<String, f64>>, GatewayError> {
        self.check(prompt)?;
        let rule = self.lookup(prompt, |r| r.scores.is_some())?;
        Ok(rule.scores.map(|s| candidates.iter().map(|c| (c.to_string(), s.get(*c).copied().unwrap_or(f64::NEG_INFINITY))).collect()))
    }

    fn hidden_state(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let dim = self.hidden_dim.ok_or(GatewayError::Capability("hidden states"))?;
        let mut v = vec![0f32; dim];
        for w in text.split_whitespace() {
            let d = Sha256::digest(w.as_bytes());
            let i = u32::from_le_bytes([d[0], d[1], d[2], d[3]]) as usize % dim;
            v[i] += if d[4] & 1 == 0 { 1.0 } else { -1.0 };
        }
        Ok(v)
    }
}

fn truncate_words(text: &str, max: usize) -> String {
    let mut seen = 0;
    for (i, c) in text.char_indices() {
        let starts_word = !c.is_whitespace() && (i == 0 || text[..i].ends_with(char::is_whitespace));
        if starts_word {
            seen += 1;
            if seen > max {
                return text[..i].trim_end().to_string();
            }
        }
    }
    text.to_string()
}
