//! The generate-filter loop.
//!
//! For a sampled subset of system turns the loop masks the turn, asks the
//! LLM for a replacement, substitutes it and asks the LLM again whether the
//! completed dialogue is still consistent. Accepted rewrites accumulate in
//! the working dialogue; a turn whose candidates are all rejected keeps its
//! original text.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::index;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, CorpusError, Dialogue, Origin, SerializedDialogue, Utterance, SYSTEM_TOKEN};
use crate::gateway::{first_token_choice, Backend, Choice, GatewayError, GenerationConfig};
use crate::rng::{self, Rng};

/// Placeholder substituted for the system turn being rewritten.
pub const MASK_LITERAL: &str = "[masked]";
const VERDICT_CANDIDATES: [&str; 2] = ["True", "False"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationDemo {
    pub dialogue_text: String,
    pub response: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterDemo {
    pub dialogue_text: String,
    pub verdict: bool,
}

/// Few-shot material for both prompts: an instruction plus demonstrations.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FewShotPool {
    pub gen_instruction: String,
    pub gen_demos: Vec<GenerationDemo>,
    pub filter_instruction: String,
    pub filter_demos: Vec<FilterDemo>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DiversifyError {
    #[error("invalid few-shot pool: {0}")]
    InvalidPool(&'static str),
    #[error("invalid diversify config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
}

impl FewShotPool {
    pub fn validate(&self) -> Result<(), DiversifyError> {
        if self.gen_instruction.trim().is_empty() {
            return Err(DiversifyError::InvalidPool("gen_instruction is empty"));
        }
        if self.filter_instruction.trim().is_empty() {
            return Err(DiversifyError::InvalidPool("filter_instruction is empty"));
        }
        if self.gen_demos.is_empty() {
            return Err(DiversifyError::InvalidPool("gen_demos is empty"));
        }
        if self.filter_demos.is_empty() {
            return Err(DiversifyError::InvalidPool("filter_demos is empty"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiversifyConfig {
    /// Generate-filter attempts per targeted turn.
    pub max_tries: usize,
    /// Fraction of system turns targeted per dialogue (floored).
    pub rewrite_fraction: f64,
    /// Demonstrations sampled into each generation prompt.
    pub gen_demo_count: usize,
    /// Demonstrations sampled into each filter prompt.
    pub filter_demo_count: usize,
    pub seed: u64,
    /// Diversification pass counter, used in the `#divN` id suffix.
    pub pass: u32,
    pub generation: GenerationConfig,
}

impl Default for DiversifyConfig {
    fn default() -> Self {
        Self {
            max_tries: 5,
            rewrite_fraction: 0.5,
            gen_demo_count: 2,
            filter_demo_count: 2,
            seed: 0,
            pass: 1,
            generation: GenerationConfig::default(),
        }
    }
}

impl DiversifyConfig {
    pub fn validate(&self) -> Result<(), DiversifyError> {
        if self.max_tries == 0 {
            return Err(DiversifyError::InvalidConfig("max_tries must be >= 1"));
        }
        if !(self.rewrite_fraction > 0.0 && self.rewrite_fraction <= 1.0) {
            return Err(DiversifyError::InvalidConfig("rewrite_fraction must be in (0, 1]"));
        }
        if self.gen_demo_count == 0 || self.filter_demo_count == 0 {
            return Err(DiversifyError::InvalidConfig("demo counts must be >= 1"));
        }
        self.generation.validate().map_err(|_| DiversifyError::InvalidConfig("invalid generation settings"))
    }

    pub fn id_suffix(&self) -> String {
        format!("#div{}", self.pass)
    }
}

/// A dialogue with one system turn replaced by [`MASK_LITERAL`].
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedDialogue {
    pub base: Dialogue,
    /// 1-based system-turn ordinal.
    pub masked_index: usize,
    pub serialized: String,
}

impl MaskedDialogue {
    pub fn new(base: &Dialogue, masked_index: usize) -> Result<Self, CorpusError> {
        if masked_index == 0 || masked_index > base.num_system_turns() {
            return Err(CorpusError::InvalidDialogue {
                id: base.id().to_string(),
                reason: format!("mask index {masked_index} out of range"),
            });
        }
        let mut turns: Vec<Utterance> = base.turns().to_vec();
        turns[2 * masked_index - 1].text = MASK_LITERAL.to_string();
        let serialized = SerializedDialogue::from_turns(&turns).text;
        Ok(Self { base: base.clone(), masked_index, serialized })
    }

    /// The completed dialogue with `candidate` in the masked slot.
    pub fn fill(&self, candidate: &str) -> Result<Dialogue, CorpusError> {
        self.base.with_system_turn(self.masked_index, candidate, Origin::Generated)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "True")]
    True,
    #[serde(rename = "False")]
    False,
    #[serde(rename = "NO_MATCH")]
    NoMatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attempt {
    pub candidate: String,
    pub verdict: Verdict,
    /// Set when the candidate was rejected before reaching the filter.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejected: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Outcome {
    Accepted,
    FallbackOriginal,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnRecord {
    pub system_index: usize,
    pub attempts: Vec<Attempt>,
    pub outcome: Outcome,
}

/// Audit trail of one dialogue's pass through the loop.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiversifyRecord {
    pub dialogue_id: String,
    pub per_turn: Vec<TurnRecord>,
    /// Transport error that cut the dialogue short, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub aborted: Option<String>,
}

/// Chooses `floor(n * rewrite_fraction)` distinct 1-based system-turn
/// ordinals uniformly at random, ascending.
pub fn select_rewrite_indices(d: &Dialogue, cfg: &DiversifyConfig, rng: &mut Rng) -> Vec<usize> {
    let n = d.num_system_turns();
    // nudge so that e.g. 0.29 * 100 floors to 29, not 28
    let count = ((n as f64 * cfg.rewrite_fraction + 1e-9) as usize).min(n);
    if count == 0 {
        return Vec::new();
    }
    let mut picked: Vec<usize> = index::sample(rng, n, count).into_iter().map(|i| i + 1).collect();
    picked.sort_unstable();
    picked
}

fn sample_indices(len: usize, count: usize, rng: &mut Rng) -> Vec<usize> {
    index::sample(rng, len, count.min(len)).into_vec()
}

/// Instruction, sampled demonstrations, then the masked dialogue, with
/// blank lines between blocks.
pub fn build_generation_prompt(pool: &FewShotPool, md: &MaskedDialogue, demo_count: usize, rng: &mut Rng) -> String {
    let mut prompt = String::from(pool.gen_instruction.trim_end());
    for i in sample_indices(pool.gen_demos.len(), demo_count, rng) {
        let demo = &pool.gen_demos[i];
        prompt.push_str("\n\nDialogue: ");
        prompt.push_str(&demo.dialogue_text);
        prompt.push_str("\nResponse: ");
        prompt.push_str(&demo.response);
    }
    prompt.push_str("\n\nDialogue: ");
    prompt.push_str(&md.serialized);
    prompt.push_str("\nResponse:");
    prompt
}

/// Instruction, sampled judged demonstrations, then the candidate dialogue
/// text as the final block.
pub fn build_filter_prompt(pool: &FewShotPool, candidate_dialogue_text: &str, demo_count: usize, rng: &mut Rng) -> String {
    let mut prompt = String::from(pool.filter_instruction.trim_end());
    for i in sample_indices(pool.filter_demos.len(), demo_count, rng) {
        let demo = &pool.filter_demos[i];
        prompt.push_str("\n\nDialogue: ");
        prompt.push_str(&demo.dialogue_text);
        prompt.push_str("\nJudgment: ");
        prompt.push_str(if demo.verdict { "True" } else { "False" });
    }
    prompt.push_str("\n\nDialogue: ");
    prompt.push_str(candidate_dialogue_text);
    prompt
}

/// Verdict of the filter prompt. An answer that is neither `True` nor
/// `False` yields [`Verdict::NoMatch`].
pub fn judge<B: Backend + ?Sized>(backend: &B, filter_prompt: &str) -> Result<Verdict, GatewayError> {
    let outcome = first_token_choice(backend, filter_prompt, &VERDICT_CANDIDATES)?;
    Ok(match outcome.winner {
        Choice::Candidate(c) if c == "True" => Verdict::True,
        Choice::Candidate(_) => Verdict::False,
        Choice::NoMatch => Verdict::NoMatch,
    })
}

/// Trims the raw completion and strips a leading `[SYS]` echo.
pub fn clean_candidate(raw: &str) -> String {
    let mut s = raw.trim();
    while let Some(rest) = s.strip_prefix(SYSTEM_TOKEN) {
        s = rest.trim_start();
    }
    s.trim().to_string()
}

/// Runs the loop on one dialogue. User turns are never touched.
pub fn diversify_dialogue<B: Backend + ?Sized>(
    backend: &B,
    d: &Dialogue,
    pool: &FewShotPool,
    cfg: &DiversifyConfig,
    rng: &mut Rng,
) -> (Dialogue, DiversifyRecord) {
    let mut working = d.clone();
    let mut record = DiversifyRecord { dialogue_id: d.id().to_string(), per_turn: Vec::new(), aborted: None };
    let targets = select_rewrite_indices(d, cfg, rng);

    for (pos, &system_index) in targets.iter().enumerate() {
        let mut turn = TurnRecord { system_index, attempts: Vec::new(), outcome: Outcome::FallbackOriginal };
        let attempt_result = run_turn(backend, &working, system_index, pool, cfg, rng, &mut turn);
        match attempt_result {
            Ok(Some(accepted)) => {
                working = accepted;
                turn.outcome = Outcome::Accepted;
                record.per_turn.push(turn);
            }
            Ok(None) => record.per_turn.push(turn),
            Err(err) => {
                log::warn!("dialogue {}: aborting after transport error: {err}", d.id());
                record.per_turn.push(turn);
                for &rest in &targets[pos + 1..] {
                    record.per_turn.push(TurnRecord {
                        system_index: rest,
                        attempts: Vec::new(),
                        outcome: Outcome::FallbackOriginal,
                    });
                }
                record.aborted = Some(err.to_string());
                break;
            }
        }
    }
    (working, record)
}

fn run_turn<B: Backend + ?Sized>(
    backend: &B,
    working: &Dialogue,
    system_index: usize,
    pool: &FewShotPool,
    cfg: &DiversifyConfig,
    rng: &mut Rng,
    turn: &mut TurnRecord,
) -> Result<Option<Dialogue>, GatewayError> {
    let masked = MaskedDialogue::new(working, system_index).expect("index drawn from the dialogue");
    for _ in 0..cfg.max_tries {
        let prompt = build_generation_prompt(pool, &masked, cfg.gen_demo_count, rng);
        let raw = backend.complete(&prompt, &cfg.generation)?.text;
        let candidate = clean_candidate(&raw);
        let rejection = if candidate.is_empty() {
            Some("empty candidate")
        } else if candidate.contains(MASK_LITERAL) {
            Some("candidate copies the mask")
        } else {
            None
        };
        if let Some(reason) = rejection {
            turn.attempts.push(Attempt { candidate, verdict: Verdict::False, rejected: Some(reason.to_string()) });
            continue;
        }
        let filled = masked.fill(&candidate).expect("candidate is non-empty");
        let filter_prompt = build_filter_prompt(pool, &filled.serialize().text, cfg.filter_demo_count, rng);
        let verdict = judge(backend, &filter_prompt)?;
        turn.attempts.push(Attempt { candidate, verdict, rejected: None });
        if verdict == Verdict::True {
            return Ok(Some(filled));
        }
    }
    Ok(None)
}

/// Diversifies a single corpus dialogue with its own order-independent rng
/// and gives the result the pass id suffix.
pub fn diversify_one<B: Backend + ?Sized>(
    backend: &B,
    d: &Dialogue,
    pool: &FewShotPool,
    cfg: &DiversifyConfig,
) -> (Dialogue, DiversifyRecord) {
    let mut rng = rng::derived(cfg.seed, d.id());
    let (out, record) = diversify_dialogue(backend, d, pool, cfg, &mut rng);
    let id = format!("{}{}", d.id(), cfg.id_suffix());
    (out.with_id(id), record)
}

/// Sequential corpus pass. Output order follows input order.
pub fn diversify_corpus<B: Backend + ?Sized>(
    backend: &B,
    corpus: &Corpus,
    pool: &FewShotPool,
    cfg: &DiversifyConfig,
) -> Result<(Corpus, Vec<DiversifyRecord>), DiversifyError> {
    pool.validate()?;
    cfg.validate()?;
    let (dialogues, records) = corpus.dialogues().iter().map(|d| diversify_one(backend, d, pool, cfg)).unzip();
    Ok((Corpus::new(dialogues)?, records))
}

/// Union of two corpora with disjoint ids.
pub fn merge_corpora(original: &Corpus, generated: &Corpus) -> Result<Corpus, CorpusError> {
    let mut all = original.dialogues().to_vec();
    all.extend_from_slice(generated.dialogues());
    let mut merged = Corpus::new(all)?;
    merged.meta = original.meta.clone();
    Ok(merged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::{Capabilities, CompletionResult};
    use alloc::collections::BTreeMap;
    use alloc::vec;
    use core::cell::Cell;

    fn pool(gen: usize, filt: usize) -> FewShotPool {
        FewShotPool {
            gen_instruction: "Rewrite the masked system response.".into(),
            gen_demos: (0..gen)
                .map(|i| GenerationDemo { dialogue_text: format!("[USR] q{i} [SYS] {}", MASK_LITERAL), response: format!("a{i}") })
                .collect(),
            filter_instruction: "Judge whether the dialogue is consistent.".into(),
            filter_demos: (0..filt)
                .map(|i| FilterDemo { dialogue_text: format!("[USR] q{i} [SYS] a{i}"), verdict: i % 2 == 0 })
                .collect(),
        }
    }

    fn dialogue(n: usize) -> Dialogue {
        let mut turns = Vec::new();
        for i in 0..n {
            turns.push(Utterance::user(format!("user {i}")));
            turns.push(Utterance::system(format!("system {i}")));
        }
        Dialogue::new("d1", "toy", vec![], turns).unwrap()
    }

    /// Always answers the generation prompt with `text` and the filter with `verdict`.
    struct Always {
        verdict: bool,
        calls: Cell<usize>,
    }

    impl Backend for Always {
        fn capabilities(&self) -> Capabilities {
            Capabilities { supports_first_token_scores: true, supports_hidden_states: false }
        }
        fn complete(&self, prompt: &str, _: &GenerationConfig) -> Result<CompletionResult, GatewayError> {
            self.calls.set(self.calls.get() + 1);
            let n = prompt.len();
            Ok(CompletionResult { text: format!(" [SYS] rewritten {n} "), first_token_scores: None })
        }
        fn first_token_scores(&self, _: &str, _: &[&str]) -> Result<Option<BTreeMap<String, f64>>, GatewayError> {
            self.calls.set(self.calls.get() + 1);
            let (t, f) = if self.verdict { (-0.1, -2.3) } else { (-2.3, -0.1) };
            Ok(Some(BTreeMap::from([("True".into(), t), ("False".into(), f)])))
        }
    }

    struct Saying(&'static str);

    impl Backend for Saying {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn complete(&self, _: &str, _: &GenerationConfig) -> Result<CompletionResult, GatewayError> {
            Ok(CompletionResult { text: self.0.into(), first_token_scores: None })
        }
    }

    #[test]
    fn rewrite_indices_floor_half() {
        let cfg = DiversifyConfig::default();
        let mut r = rng::seeded(1);
        let idx = select_rewrite_indices(&dialogue(4), &cfg, &mut r);
        assert_eq!(idx.len(), 2);
        assert!(idx.windows(2).all(|w| w[0] < w[1]));
        assert!(idx.iter().all(|&i| (1..=4).contains(&i)));
        assert!(select_rewrite_indices(&dialogue(1), &cfg, &mut r).is_empty());
    }

    #[test]
    fn rewrite_indices_uniform() {
        // each of 6 ordinals is in a 3-subset with probability C(5,2)/C(6,3) = 1/2
        let cfg = DiversifyConfig::default();
        let d = dialogue(6);
        let mut r = rng::seeded(42);
        let mut hits = [0usize; 6];
        for _ in 0..1000 {
            for i in select_rewrite_indices(&d, &cfg, &mut r) {
                hits[i - 1] += 1;
            }
        }
        for h in hits {
            let f = h as f64 / 1000.0;
            assert!((f - 0.5).abs() <= 0.05, "frequency {f}");
        }
    }

    #[test]
    fn masked_dialogue_has_one_mask() {
        let md = MaskedDialogue::new(&dialogue(3), 2).unwrap();
        assert_eq!(md.serialized.matches(MASK_LITERAL).count(), 1);
        assert!(md.serialized.contains("[SYS] system 0") && !md.serialized.contains("system 1"));
        assert!(MaskedDialogue::new(&dialogue(3), 4).is_err());
    }

    #[test]
    fn generation_prompt_layout() {
        let mut p = pool(1, 1);
        p.gen_demos[0].dialogue_text = "[USR] q [SYS] placeholder".into();
        let md = MaskedDialogue::new(&dialogue(1), 1).unwrap();
        let prompt = build_generation_prompt(&p, &md, 1, &mut rng::seeded(0));
        assert!(prompt.starts_with("Rewrite the masked system response."));
        assert!(prompt.contains("[USR] q [SYS] placeholder\nResponse: a0"));
        assert_eq!(prompt.matches(MASK_LITERAL).count(), 1);
        assert!(prompt.contains("\n\n"));
    }

    #[test]
    fn generation_prompt_distinct_demos() {
        let p = pool(5, 1);
        let md = MaskedDialogue::new(&dialogue(2), 1).unwrap();
        for seed in 0..20 {
            let prompt = build_generation_prompt(&p, &md, 2, &mut rng::seeded(seed));
            let used: Vec<_> = (0..5).filter(|i| prompt.contains(&format!("Response: a{i}\n"))).collect();
            assert_eq!(used.len(), 2, "{prompt}");
        }
    }

    #[test]
    fn prompts_deterministic() {
        let p = pool(5, 5);
        let md = MaskedDialogue::new(&dialogue(2), 2).unwrap();
        for seed in 0..10 {
            assert_eq!(
                build_generation_prompt(&p, &md, 2, &mut rng::seeded(seed)),
                build_generation_prompt(&p, &md, 2, &mut rng::seeded(seed))
            );
            assert_eq!(
                build_filter_prompt(&p, "[USR] x [SYS] y", 2, &mut rng::seeded(seed)),
                build_filter_prompt(&p, "[USR] x [SYS] y", 2, &mut rng::seeded(seed))
            );
        }
    }

    #[test]
    fn filter_prompt_layout() {
        let p = pool(1, 1);
        let prompt = build_filter_prompt(&p, "[USR] x [SYS] y", 1, &mut rng::seeded(0));
        assert!(prompt.contains("Judgment: True"));
        assert!(prompt.ends_with("[USR] x [SYS] y"));
    }

    #[test]
    fn judge_paths() {
        assert_eq!(judge(&Always { verdict: true, calls: Cell::new(0) }, "p").unwrap(), Verdict::True);
        assert_eq!(judge(&Always { verdict: false, calls: Cell::new(0) }, "p").unwrap(), Verdict::False);
        assert_eq!(judge(&Saying("I am a large language model"), "p").unwrap(), Verdict::NoMatch);
    }

    #[test]
    fn always_false_keeps_dialogue() {
        let d = dialogue(4);
        let b = Always { verdict: false, calls: Cell::new(0) };
        let (out, rec) = diversify_dialogue(&b, &d, &pool(3, 3), &DiversifyConfig::default(), &mut rng::seeded(5));
        assert_eq!(out, d);
        assert_eq!(rec.per_turn.len(), 2);
        for t in &rec.per_turn {
            assert_eq!(t.attempts.len(), 5);
            assert_eq!(t.outcome, Outcome::FallbackOriginal);
        }
    }

    #[test]
    fn always_true_rewrites_half() {
        let d = dialogue(5);
        let b = Always { verdict: true, calls: Cell::new(0) };
        let (out, rec) = diversify_dialogue(&b, &d, &pool(3, 3), &DiversifyConfig::default(), &mut rng::seeded(5));
        let changed: Vec<usize> =
            (1..=5).filter(|&i| out.system_turn(i).unwrap().text != d.system_turn(i).unwrap().text).collect();
        assert_eq!(changed.len(), 2);
        assert_eq!(changed, rec.per_turn.iter().map(|t| t.system_index).collect::<Vec<_>>());
        for i in 1..=5 {
            assert_eq!(out.turns()[2 * i - 2], d.turns()[2 * i - 2]);
        }
        for t in &rec.per_turn {
            assert_eq!(t.attempts.len(), 1);
            assert_eq!(t.outcome, Outcome::Accepted);
            // leading role echo stripped
            assert!(t.attempts[0].candidate.starts_with("rewritten"));
        }
        assert_eq!(out.system_turn(changed[0]).unwrap().origin, Origin::Generated);
    }

    #[test]
    fn single_turn_makes_no_calls() {
        let d = dialogue(1);
        let b = Always { verdict: true, calls: Cell::new(0) };
        let (out, rec) = diversify_dialogue(&b, &d, &pool(1, 1), &DiversifyConfig::default(), &mut rng::seeded(0));
        assert_eq!(out, d);
        assert!(rec.per_turn.is_empty());
        assert_eq!(b.calls.get(), 0);
    }

    #[test]
    fn degenerate_candidates_skip_filter() {
        let d = dialogue(2);
        for text in ["   ", "[SYS]", "sure [masked] thing"] {
            let (out, rec) =
                diversify_dialogue(&Saying(text), &d, &pool(1, 1), &DiversifyConfig::default(), &mut rng::seeded(0));
            assert_eq!(out, d);
            let t = &rec.per_turn[0];
            assert_eq!(t.attempts.len(), 5);
            assert!(t.attempts.iter().all(|a| a.rejected.is_some()));
        }
    }

    struct Flaky;

    impl Backend for Flaky {
        fn capabilities(&self) -> Capabilities {
            Capabilities::default()
        }
        fn complete(&self, _: &str, _: &GenerationConfig) -> Result<CompletionResult, GatewayError> {
            Err(GatewayError::Timeout)
        }
    }

    #[test]
    fn transport_error_aborts() {
        let d = dialogue(4);
        let (out, rec) = diversify_dialogue(&Flaky, &d, &pool(1, 1), &DiversifyConfig::default(), &mut rng::seeded(0));
        assert_eq!(out, d);
        assert!(rec.aborted.is_some());
        assert_eq!(rec.per_turn.len(), 2);
        assert!(rec.per_turn.iter().all(|t| t.outcome == Outcome::FallbackOriginal));
    }

    #[test]
    fn corpus_pass_and_merge() {
        let dialogues: Vec<Dialogue> = (0..10).map(|i| dialogue(3).with_id(format!("d{i}"))).collect();
        let corpus = Corpus::new(dialogues).unwrap();
        let b = Always { verdict: true, calls: Cell::new(0) };
        let (generated, records) = diversify_corpus(&b, &corpus, &pool(2, 2), &DiversifyConfig::default()).unwrap();
        assert_eq!(generated.len(), 10);
        assert_eq!(records.len(), 10);
        assert!(generated.dialogues().iter().all(|d| d.id().ends_with("#div1")));
        let merged = merge_corpora(&corpus, &generated).unwrap();
        assert_eq!(merged.len(), 20);
        assert_eq!(merge_corpora(&corpus, &Corpus::default()).unwrap(), corpus);
        assert!(matches!(merge_corpora(&corpus, &corpus), Err(CorpusError::DuplicateId(_))));
    }

    #[test]
    fn config_validation() {
        assert!(DiversifyConfig { max_tries: 0, ..Default::default() }.validate().is_err());
        assert!(DiversifyConfig { rewrite_fraction: 0.0, ..Default::default() }.validate().is_err());
        assert!(DiversifyConfig { rewrite_fraction: 1.5, ..Default::default() }.validate().is_err());
        assert!(pool(0, 1).validate().is_err());
    }
}
