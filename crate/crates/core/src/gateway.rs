//! Backend-agnostic LLM access: sampled completion and first-token choice
//! scoring. Concrete backends (scripted mock, HTTP client) live in the
//! `divtod` crate.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

/// Upper bound on tokens decoded when a backend cannot score candidates
/// directly and the choice is read off greedy text instead.
pub const FALLBACK_DECODE_TOKENS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub temperature: f64,
    pub max_new_tokens: u32,
    pub sampling: bool,
    pub seed: Option<u64>,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self { temperature: 0.7, max_new_tokens: 1024, sampling: true, seed: None }
    }
}

impl GenerationConfig {
    pub fn greedy(max_new_tokens: u32) -> Self {
        Self { temperature: 1.0, max_new_tokens, sampling: false, seed: None }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_new_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_new_tokens must be >= 1".into()));
        }
        if self.sampling && !(self.temperature > 0.0) {
            return Err(GatewayError::InvalidRequest("temperature must be > 0 when sampling".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionResult {
    /// Decoded continuation only; the prompt is never echoed.
    pub text: String,
    /// Log-scores of the requested candidate first tokens, when asked for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub first_token_scores: Option<BTreeMap<String, f64>>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Capabilities {
    pub supports_first_token_scores: bool,
    pub supports_hidden_states: bool,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GatewayError {
    #[error("backend request timed out")]
    Timeout,
    #[error("prompt of {prompt_len} exceeds the backend context limit of {limit}")]
    ContextOverflow { prompt_len: usize, limit: usize },
    #[error("backend unavailable: {0}")]
    BackendUnavailable(String),
    #[error("backend lacks capability: {0}")]
    Capability(&'static str),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

impl GatewayError {
    /// Transport failures worth retrying; everything else is permanent.
    pub fn is_transient(&self) -> bool {
        matches!(self, GatewayError::Timeout | GatewayError::BackendUnavailable(_))
    }
}

/// A text-completion model.
///
/// Implementations either fulfil a request completely or return one of the
/// [`GatewayError`] variants.
pub trait Backend {
    fn capabilities(&self) -> Capabilities;

    fn complete(&self, prompt: &str, cfg: &GenerationConfig) -> Result<CompletionResult, GatewayError>;

    /// Log-scores of the first backend token of each candidate continuation.
    /// `Ok(None)` means this request cannot be scored and the caller should
    /// fall back to reading decoded text.
    fn first_token_scores(&self, prompt: &str, candidates: &[&str]) -> Result<Option<BTreeMap<String, f64>>, GatewayError> {
        let _ = (prompt, candidates);
        Ok(None)
    }

    /// Final-position hidden state for decoder-style zero-shot retrieval.
    fn hidden_state(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        let _ = text;
        Err(GatewayError::Capability("hidden states"))
    }
}

impl<B: Backend + ?Sized> Backend for &B {
    fn capabilities(&self) -> Capabilities {
        (**self).capabilities()
    }
    fn complete(&self, prompt: &str, cfg: &GenerationConfig) -> Result<CompletionResult, GatewayError> {
        (**self).complete(prompt, cfg)
    }
    fn first_token_scores(&self, prompt: &str, candidates: &[&str]) -> Result<Option<BTreeMap<String, f64>>, GatewayError> {
        (**self).first_token_scores(prompt, candidates)
    }
    fn hidden_state(&self, text: &str) -> Result<Vec<f32>, GatewayError> {
        (**self).hidden_state(text)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Choice {
    Candidate(String),
    /// The backend answered with something that is none of the candidates.
    NoMatch,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChoiceOutcome {
    pub winner: Choice,
    /// Candidate scores; empty when the text fallback decided.
    pub scores: BTreeMap<String, f64>,
    /// Decoded text, when the text fallback decided.
    pub decoded: Option<String>,
}

/// Picks the candidate with the highest first-token score. Ties go to the
/// earlier candidate.
pub fn argmax_choice(candidates: &[&str], scores: &BTreeMap<String, f64>) -> Choice {
    let mut best: Option<(&str, f64)> = None;
    for &c in candidates {
        let s = scores.get(c).copied().unwrap_or(f64::NEG_INFINITY);
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((c, s));
        }
    }
    match best {
        Some((c, s)) if s > f64::NEG_INFINITY => Choice::Candidate(c.to_string()),
        _ => Choice::NoMatch,
    }
}

/// Reads a choice off decoded text: the first candidate that prefixes the
/// trimmed text, compared case-insensitively.
pub fn match_candidate_prefix(text: &str, candidates: &[&str]) -> Choice {
    let trimmed = text.trim_start();
    for &c in candidates {
        let n = c.chars().count();
        let head: String = trimmed.chars().take(n).collect();
        if n > 0 && head.to_lowercase() == c.to_lowercase() {
            return Choice::Candidate(c.to_string());
        }
    }
    Choice::NoMatch
}

/// Asks the backend to choose among `candidates` for the next word.
pub fn first_token_choice<B: Backend + ?Sized>(
    backend: &B,
    prompt: &str,
    candidates: &[&str],
) -> Result<ChoiceOutcome, GatewayError> {
    if candidates.is_empty() {
        return Err(GatewayError::InvalidRequest("no candidates".into()));
    }
    for (i, c) in candidates.iter().enumerate() {
        if candidates[..i].contains(c) {
            return Err(GatewayError::InvalidRequest("candidates must be distinct".into()));
        }
    }
    if backend.capabilities().supports_first_token_scores {
        if let Some(scores) = backend.first_token_scores(prompt, candidates)? {
            let winner = argmax_choice(candidates, &scores);
            return Ok(ChoiceOutcome { winner, scores, decoded: None });
        }
    }
    let decoded = backend.complete(prompt, &GenerationConfig::greedy(FALLBACK_DECODE_TOKENS))?.text;
    let winner = match_candidate_prefix(&decoded, candidates);
    Ok(ChoiceOutcome { winner, scores: BTreeMap::new(), decoded: Some(decoded) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;
    use core::cell::RefCell;

    struct Fixed {
        scores: Option<BTreeMap<String, f64>>,
        text: String,
        calls: RefCell<Vec<GenerationConfig>>,
    }

    impl Backend for Fixed {
        fn capabilities(&self) -> Capabilities {
            Capabilities { supports_first_token_scores: self.scores.is_some(), supports_hidden_states: false }
        }
        fn complete(&self, _prompt: &str, cfg: &GenerationConfig) -> Result<CompletionResult, GatewayError> {
            self.calls.borrow_mut().push(cfg.clone());
            Ok(CompletionResult { text: self.text.clone(), first_token_scores: None })
        }
        fn first_token_scores(&self, _: &str, _: &[&str]) -> Result<Option<BTreeMap<String, f64>>, GatewayError> {
            Ok(self.scores.clone())
        }
    }

    fn scored(t: f64, f: f64) -> Fixed {
        let scores = BTreeMap::from([("True".to_string(), t), ("False".to_string(), f)]);
        Fixed { scores: Some(scores), text: String::new(), calls: RefCell::new(vec![]) }
    }

    fn texted(text: &str) -> Fixed {
        Fixed { scores: None, text: text.into(), calls: RefCell::new(vec![]) }
    }

    #[test]
    fn defaults() {
        let cfg = GenerationConfig::default();
        assert_eq!(cfg.temperature, 0.7);
        assert_eq!(cfg.max_new_tokens, 1024);
        assert!(cfg.sampling);
        assert!(cfg.validate().is_ok());
        assert!(GenerationConfig { max_new_tokens: 0, ..cfg.clone() }.validate().is_err());
        assert!(GenerationConfig { temperature: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn argmax_over_scores() {
        let out = first_token_choice(&scored(-0.1, -2.3), "p", &["True", "False"]).unwrap();
        assert_eq!(out.winner, Choice::Candidate("True".into()));
        let out = first_token_choice(&scored(-3.0, -0.2), "p", &["True", "False"]).unwrap();
        assert_eq!(out.winner, Choice::Candidate("False".into()));
    }

    #[test]
    fn fallback_prefix_match() {
        let b = texted("false, the response repeats a question");
        let out = first_token_choice(&b, "p", &["True", "False"]).unwrap();
        assert_eq!(out.winner, Choice::Candidate("False".into()));
        let cfg = &b.calls.borrow()[0];
        assert!(!cfg.sampling);
        assert_eq!(cfg.max_new_tokens, FALLBACK_DECODE_TOKENS);
    }

    #[test]
    fn fallback_no_match() {
        for text in ["Okay, here is the written response", "I am a large language model"] {
            let out = first_token_choice(&texted(text), "p", &["True", "False"]).unwrap();
            assert_eq!(out.winner, Choice::NoMatch, "{text}");
        }
    }

    #[test]
    fn rejects_bad_candidates() {
        assert!(first_token_choice(&texted("x"), "p", &[]).is_err());
        assert!(first_token_choice(&texted("x"), "p", &["True", "True"]).is_err());
    }

    #[test]
    fn argmax_shift_invariant() {
        let c = ["True", "False", "Maybe"];
        for (a, b, d, shift) in [(0.1, -0.3, 0.0, 5.0), (-2.0, -1.0, -1.5, -100.0), (3.0, 3.0, 1.0, 0.5)] {
            let s1: BTreeMap<String, f64> = BTreeMap::from([("True".into(), a), ("False".into(), b), ("Maybe".into(), d)]);
            let s2 = s1.iter().map(|(k, v)| (k.clone(), v + shift)).collect();
            assert_eq!(argmax_choice(&c, &s1), argmax_choice(&c, &s2));
        }
    }
}
