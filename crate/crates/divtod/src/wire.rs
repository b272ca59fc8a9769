//! Client for OpenAI-compatible `/completions` servers.

use std::collections::BTreeMap;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use divtod_core::gateway::{Backend, Capabilities, CompletionResult, GatewayError, GenerationConfig};
use serde::{Deserialize, Serialize};

pub const ENDPOINT_VAR: &str = "DIVTOD_LLM_ENDPOINT";
pub const KEY_VAR: &str = "DIVTOD_LLM_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WireConfig {
    /// Base URL; `/completions` is appended.
    pub endpoint: String,
    pub model: String,
    pub max_in_flight: usize,
    pub attempts: usize,
    pub backoff_ms: u64,
    pub timeout_secs: u64,
    /// Number of alternatives requested per position when scoring.
    pub top_logprobs: u32,
    /// Local pre-check on prompt length in characters.
    pub context_limit: Option<usize>,
}

impl Default for WireConfig {
    fn default() -> Self {
        Self {
            endpoint: String::new(),
            model: "default".into(),
            max_in_flight: 4,
            attempts: 3,
            backoff_ms: 1000,
            timeout_secs: 120,
            top_logprobs: 20,
            context_limit: None,
        }
    }
}

/// Request body. Field order is fixed so identical inputs serialize to
/// identical bytes.
#[derive(Debug, Serialize)]
pub struct CompletionRequest<'a> {
    pub model: &'a str,
    pub prompt: &'a str,
    pub max_tokens: u32,
    pub temperature: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub logprobs: Option<u32>,
    pub echo: bool,
}

#[derive(Debug, Deserialize)]
struct CompletionResponse {
    choices: Vec<ResponseChoice>,
}

#[derive(Debug, Deserialize)]
struct ResponseChoice {
    #[serde(default)]
    text: String,
    #[serde(default)]
    logprobs: Option<Logprobs>,
}

#[derive(Debug, Deserialize)]
struct Logprobs {
    #[serde(default)]
    top_logprobs: Vec<BTreeMap<String, f64>>,
}

struct Semaphore {
    free: Mutex<usize>,
    cv: Condvar,
}

impl Semaphore {
    fn acquire(&self) -> SemaphoreGuard<'_> {
        let mut free = self.free.lock().expect("semaphore lock");
        while *free == 0 {
            free = self.cv.wait(free).expect("semaphore lock");
        }
        *free -= 1;
        SemaphoreGuard(self)
    }
}

struct SemaphoreGuard<'a>(&'a Semaphore);

impl Drop for SemaphoreGuard<'_> {
    fn drop(&mut self) {
        *self.0.free.lock().expect("semaphore lock") += 1;
        self.0.cv.notify_one();
    }
}

pub struct WireBackend {
    cfg: WireConfig,
    key: Option<String>,
    agent: ureq::Agent,
    slots: Semaphore,
}

impl WireBackend {
    pub fn new(cfg: WireConfig, key: Option<String>) -> Result<Self, GatewayError> {
        if cfg.endpoint.is_empty() {
            return Err(GatewayError::InvalidRequest(format!("no endpoint configured; set {ENDPOINT_VAR}")));
        }
        if cfg.max_in_flight == 0 || cfg.attempts == 0 {
            return Err(GatewayError::InvalidRequest("max_in_flight and attempts must be >= 1".into()));
        }
        let agent = ureq::Agent::config_builder()
            .timeout_global(Some(Duration::from_secs(cfg.timeout_secs)))
            .http_status_as_error(false)
            .build()
            .into();
        let slots = Semaphore { free: Mutex::new(cfg.max_in_flight), cv: Condvar::new() };
        Ok(Self { cfg, key, agent, slots })
    }

    /// Endpoint and key from the environment; the endpoint variable wins
    /// over the configured one.
    pub fn from_env(mut cfg: WireConfig) -> Result<Self, GatewayError> {
        if let Ok(e) = std::env::var(ENDPOINT_VAR) {
            cfg.endpoint = e;
        }
        let key = std::env::var(KEY_VAR).ok().filter(|k| !k.is_empty());
        Self::new(cfg, key)
    }

    pub fn request_body(&self, prompt: &str, gen: &GenerationConfig, logprobs: Option<u32>) -> String {
        let req = CompletionRequest {
            model: &self.cfg.model,
            prompt,
            max_tokens: gen.max_new_tokens,
            temperature: if gen.sampling { gen.temperature } else { 0.0 },
            seed: gen.seed,
            logprobs,
            echo: false,
        };
        serde_json::to_string(&req).expect("serializable")
    }

    fn url(&self) -> String {
        format!("{}/completions", self.cfg.endpoint.trim_end_matches('/'))
    }

    fn post_once(&self, body: &str, prompt_len: usize) -> Result<CompletionResponse, GatewayError> {
        let _slot = self.slots.acquire();
        let mut req = self.agent.post(self.url()).header("Content-Type", "application/json");
        if let Some(k) = &self.key {
            req = req.header("Authorization", format!("Bearer {k}"));
        }
        let mut resp = req.send(body).map_err(map_transport)?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().map_err(map_transport)?;
        match status {
            200..=299 => serde_json::from_str(&text).map_err(|e| GatewayError::BackendUnavailable(format!("malformed response: {e}"))),
            408 | 504 => Err(GatewayError::Timeout),
            400..=499 if text.contains("context") && (text.contains("length") || text.contains("maximum")) => {
                Err(GatewayError::ContextOverflow { prompt_len, limit: self.cfg.context_limit.unwrap_or(0) })
            }
            429 => Err(GatewayError::BackendUnavailable("rate limited".into())),
            400..=499 => Err(GatewayError::InvalidRequest(format!("HTTP {status}: {}", snippet(&text)))),
            _ => Err(GatewayError::BackendUnavailable(format!("HTTP {status}: {}", snippet(&text)))),
        }
    }

    fn post(&self, prompt: &str, body: &str) -> Result<CompletionResponse, GatewayError> {
        if prompt.is_empty() {
            return Err(GatewayError::InvalidRequest("empty prompt".into()));
        }
        let prompt_len = prompt.chars().count();
        if let Some(limit) = self.cfg.context_limit.filter(|&l| prompt_len > l) {
            return Err(GatewayError::ContextOverflow { prompt_len, limit });
        }
        log::debug!("POST {} {body}", self.url());
        let mut delay = Duration::from_millis(self.cfg.backoff_ms);
        let mut attempt = 1;
        loop {
            match self.post_once(body, prompt_len) {
                Err(e) if e.is_transient() && attempt < self.cfg.attempts => {
                    log::warn!("attempt {attempt} failed: {e}; retrying in {delay:?}");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                other => return other,
            }
        }
    }
}

fn snippet(s: &str) -> String {
    s.chars().take(200).collect()
}

fn map_transport(e: ureq::Error) -> GatewayError {
    match e {
        ureq::Error::Timeout(_) => GatewayError::Timeout,
        ureq::Error::Io(io) if io.kind() == std::io::ErrorKind::TimedOut => GatewayError::Timeout,
        other => GatewayError::BackendUnavailable(other.to_string()),
    }
}

fn strip_token_marker(t: &str) -> &str {
    t.trim_start_matches(['\u{120}', '\u{2581}']).trim_start()
}

/// Best log-prob per candidate among top alternatives whose text is a
/// non-empty prefix of that candidate. Longer prefixes win ties in length.
pub fn candidate_scores(top: &BTreeMap<String, f64>, candidates: &[&str]) -> BTreeMap<String, f64> {
    let mut out = BTreeMap::new();
    for &c in candidates {
        let mut best: Option<(usize, f64)> = None;
        for (tok, &lp) in top {
            let t = strip_token_marker(tok);
            if t.is_empty() || !c.starts_with(t) {
                continue;
            }
            if best.is_none_or(|(len, b)| t.len() > len || (t.len() == len && lp > b)) {
                best = Some((t.len(), lp));
            }
        }
        if let Some((_, lp)) = best {
            out.insert(c.to_string(), lp);
        }
    }
    out
}

impl Backend for WireBackend {
    fn capabilities(&self) -> Capabilities {
        Capabilities { supports_first_token_scores: true, supports_hidden_states: false }
    }

    fn complete(&self, prompt: &str, cfg: &GenerationConfig) -> Result<CompletionResult, GatewayError> {
        cfg.validate()?;
        let body = self.request_body(prompt, cfg, None);
        let resp = self.post(prompt, &body)?;
        let choice = resp.choices.into_iter().next().ok_or_else(|| GatewayError::BackendUnavailable("response has no choices".into()))?;
        Ok(CompletionResult { text: choice.text, first_token_scores: None })
    }

    fn first_token_scores(&self, prompt: &str, candidates: &[&str]) -> Result<Option<BTreeMap<String, f64>>, GatewayError> {
        let body = self.request_body(prompt, &GenerationConfig::greedy(1), Some(self.cfg.top_logprobs));
        let resp = self.post(prompt, &body)?;
        let Some(top) = resp.choices.into_iter().next().and_then(|c| c.logprobs).and_then(|l| l.top_logprobs.into_iter().next()) else {
            return Ok(None);
        };
        let found = candidate_scores(&top, candidates);
        if found.is_empty() {
            return Ok(None);
        }
        Ok(Some(candidates.iter().map(|c| (c.to_string(), found.get(*c).copied().unwrap_or(f64::NEG_INFINITY))).collect()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use divtod_core::gateway::{first_token_choice, Choice};
    use std::io::{BufRead, BufReader, Read, Write};
    use std::net::TcpListener;
    use std::sync::mpsc;

    /// Serves `replies` in order, one connection each, and forwards every
    /// request body.
    fn server(replies: Vec<(u16, String)>) -> (String, mpsc::Receiver<String>) {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            for (status, body) in replies {
                let (stream, _) = listener.accept().unwrap();
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut len = 0;
                loop {
                    let mut line = String::new();
                    reader.read_line(&mut line).unwrap();
                    if line == "\r\n" || line.is_empty() {
                        break;
                    }
                    if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                        len = v.trim().parse().unwrap();
                    }
                }
                let mut buf = vec![0; len];
                reader.read_exact(&mut buf).unwrap();
                tx.send(String::from_utf8(buf).unwrap()).unwrap();
                let mut stream = stream;
                write!(stream, "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}", body.len()).unwrap();
            }
        });
        (format!("http://{addr}/v1"), rx)
    }

    fn backend(endpoint: String) -> WireBackend {
        WireBackend::new(WireConfig { endpoint, backoff_ms: 1, ..WireConfig::default() }, Some("k".into())).unwrap()
    }

    #[test]
    fn completion_round_trip() {
        let (url, rx) = server(vec![(200, r#"{"choices":[{"text":" Sure, table for two."}]}"#.into())]);
        let b = backend(url);
        let out = b.complete("hello", &GenerationConfig::default()).unwrap();
        assert_eq!(out.text, " Sure, table for two.");
        let body = rx.recv().unwrap();
        assert_eq!(body, b.request_body("hello", &GenerationConfig::default(), None));
        assert_eq!(body, r#"{"model":"default","prompt":"hello","max_tokens":1024,"temperature":0.7,"echo":false}"#);
    }

    #[test]
    fn retries_transient_failures() {
        let ok = r#"{"choices":[{"text":"ok"}]}"#.to_string();
        let (url, rx) = server(vec![(503, "{}".into()), (500, "{}".into()), (200, ok)]);
        assert_eq!(backend(url).complete("p", &GenerationConfig::default()).unwrap().text, "ok");
        assert_eq!(rx.iter().take(3).count(), 3);

        let (url, _rx) = server(vec![(503, "{}".into()), (503, "{}".into()), (503, "{}".into())]);
        assert!(matches!(backend(url).complete("p", &GenerationConfig::default()), Err(GatewayError::BackendUnavailable(_))));
    }

    #[test]
    fn maps_permanent_errors() {
        let (url, _rx) = server(vec![(400, r#"{"error":"maximum context length exceeded"}"#.into())]);
        assert!(matches!(backend(url).complete("p", &GenerationConfig::default()), Err(GatewayError::ContextOverflow { .. })));
        let (url, _rx) = server(vec![(401, r#"{"error":"bad key"}"#.into())]);
        assert!(matches!(backend(url).complete("p", &GenerationConfig::default()), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn scores_from_top_logprobs() {
        let reply = r#"{"choices":[{"text":"True","logprobs":{"top_logprobs":[{"ĠTrue":-0.1,"False":-2.3,"Tr":-4.0,"Hello":-1.0}]}}]}"#;
        let (url, rx) = server(vec![(200, reply.into())]);
        let out = first_token_choice(&backend(url), "judge", &["True", "False"]).unwrap();
        assert_eq!(out.winner, Choice::Candidate("True".into()));
        assert_eq!(out.scores["True"], -0.1);
        assert_eq!(out.scores["False"], -2.3);
        assert!(rx.recv().unwrap().contains("\"logprobs\":20"));
    }

    #[test]
    fn local_context_check() {
        let b = WireBackend::new(WireConfig { endpoint: "http://127.0.0.1:9".into(), context_limit: Some(3), ..WireConfig::default() }, None).unwrap();
        assert!(matches!(b.complete("long prompt", &GenerationConfig::default()), Err(GatewayError::ContextOverflow { limit: 3, .. })));
        assert!(WireBackend::new(WireConfig::default(), None).is_err());
    }
}
