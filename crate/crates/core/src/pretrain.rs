//! Context/future self-training of the dialogue encoder.
//!
//! The student reads a (partially masked) dialogue context; the teacher, a
//! periodically refreshed copy of the student, reads the whole dialogue.
//! A predictor head maps the student's summary vector onto the teacher's,
//! and a masked-token loss on the context rides along.

use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Dialogue, Utterance};
use crate::nn::{Bound, Dropout, Encoder, EncoderShape, ParamStore, PredictorHead, TokenBatch};
use crate::optim::{Adam, LinearSchedule};
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Matrix, Scalar, Var};
use crate::tokenizer::{Tokenizer, MASK};

const STUDENT: usize = 0;
const TEACHER: usize = 1;
const PREDICTOR: usize = 2;
const PREDICTOR_MID: usize = 512;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PretrainError {
    #[error("invalid encoder config: {0}")]
    InvalidEncoder(String),
    #[error("invalid training config: {0}")]
    InvalidTrain(String),
    #[error("tokenizer {found} does not match encoder vocabulary {expected}")]
    VocabMismatch { expected: String, found: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; `0` means four times `hidden_dim`.
    pub ffn_dim: usize,
    /// Tokenizer fingerprint; empty until a tokenizer is bound.
    pub vocab: String,
    pub max_len: usize,
    pub dropout: f64,
    pub toy_mode: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self { hidden_dim: 768, layers: 12, heads: 12, ffn_dim: 0, vocab: String::new(), max_len: 512, dropout: 0.2, toy_mode: false }
    }
}

impl EncoderConfig {
    /// Randomly initialized 4 x 256 encoder for CPU-scale runs.
    pub fn toy() -> Self {
        Self { hidden_dim: 256, layers: 4, heads: 4, max_len: 128, toy_mode: true, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::InvalidEncoder(m.to_string()));
        if self.hidden_dim == 0 || self.heads == 0 || self.layers == 0 {
            return bad("hidden_dim, heads and layers must be positive");
        }
        if self.hidden_dim % self.heads != 0 {
            return bad("hidden_dim must be divisible by heads");
        }
        if self.max_len < 16 {
            return bad("max_len must be at least 16");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    pub fn ffn(&self) -> usize {
        if self.ffn_dim == 0 {
            4 * self.hidden_dim
        } else {
            self.ffn_dim
        }
    }

    pub fn shape(&self, vocab_size: usize) -> EncoderShape {
        EncoderShape {
            vocab: vocab_size,
            hidden: self.hidden_dim,
            layers: self.layers,
            heads: self.heads,
            ffn: self.ffn(),
            max_len: self.max_len,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillLoss {
    NegCosine,
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr: f64,
    pub warmup_steps: usize,
    pub mask_ratio: f64,
    pub teacher_update_period: usize,
    pub distill_loss: DistillLoss,
    pub mlm_weight: f64,
    pub max_steps: usize,
    pub eval_every: usize,
    /// Evaluations without dev improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 48,
            lr: 5e-5,
            warmup_steps: 0,
            mask_ratio: 0.15,
            teacher_update_period: 100,
            distill_loss: DistillLoss::NegCosine,
            mlm_weight: 1.0,
            max_steps: 10_000,
            eval_every: 100,
            patience: 10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), PretrainError> {
        let bad = |m: &str| Err(PretrainError::InvalidTrain(m.to_string()));
        if !(self.mask_ratio > 0.0 && self.mask_ratio < 1.0) {
            return bad("mask_ratio must be in (0, 1)");
        }
        if self.teacher_update_period == 0 {
            return bad("teacher_update_period must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.eval_every == 0 {
            return bad("eval_every must be positive");
        }
        if !(self.mlm_weight >= 0.0 && self.mlm_weight.is_finite()) {
            return bad("mlm_weight must be non-negative");
        }
        Ok(())
    }

    fn schedule(&self) -> LinearSchedule {
        LinearSchedule { peak: self.lr, warmup: self.warmup_steps, total: self.max_steps }
    }
}

/// Uniform split over the `t - 1` interior turn boundaries.
pub fn split_context_future<'d>(d: &'d Dialogue, rng: &mut Rng) -> (&'d [Utterance], &'d [Utterance]) {
    let turns = d.turns();
    assert!(turns.len() >= 2, "split needs at least two turns");
    let cut = rng.random_range(1..turns.len());
    turns.split_at(cut)
}

/// Masked copy of `ids` plus the masked positions and their original ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Masked {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Bernoulli(`ratio`) over non-special positions; chosen ones become
/// `[MASK]` 80% of the time, a random word 10%, and stay unchanged 10%.
pub fn mask_tokens(ids: &[usize], vocab_size: usize, ratio: f64, rng: &mut Rng) -> Masked {
    let mut out = Masked { ids: ids.to_vec(), positions: Vec::new(), targets: Vec::new() };
    let first_word = Tokenizer::num_special();
    for (i, &id) in ids.iter().enumerate() {
        if Tokenizer::is_special(id) || rng.random::<f64>() >= ratio {
            continue;
        }
        out.positions.push(i);
        out.targets.push(id);
        let r: f64 = rng.random();
        if r < 0.8 {
            out.ids[i] = MASK;
        } else if r < 0.9 && vocab_size > first_word {
            out.ids[i] = rng.random_range(first_word..vocab_size);
        }
    }
    out
}

/// Token batches for one training step with masks already drawn.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedBatch {
    pub student: TokenBatch,
    pub teacher: TokenBatch,
    /// Flat rows of `student` that carry a masked-token target.
    pub mlm_rows: Vec<usize>,
    pub mlm_targets: Vec<usize>,
    pub skipped: usize,
}

/// Splits, tokenizes and masks a batch. Dialogues that cannot fit even
/// their last two turns are skipped.
pub fn prepare_batch(tokenizer: &Tokenizer, dialogues: &[&Dialogue], max_len: usize, mask_ratio: f64, rng: &mut Rng) -> Option<PreparedBatch> {
    let mut student = Vec::new();
    let mut teacher = Vec::new();
    let mut mlm_rows = Vec::new();
    let mut mlm_targets = Vec::new();
    let mut skipped = 0;
    for d in dialogues {
        if d.turns().len() < 2 {
            skipped += 1;
            continue;
        }
        let (context, _) = split_context_future(d, rng);
        let (Some(c), Some(t)) = (tokenizer.encode_turns(context, max_len), tokenizer.encode_turns(d.turns(), max_len)) else {
            log::warn!("dialogue {} does not fit max_len {max_len}; skipped", d.id());
            skipped += 1;
            continue;
        };
        let masked = mask_tokens(&c, tokenizer.len(), mask_ratio, rng);
        student.push(masked.ids);
        teacher.push(t);
        mlm_targets.extend(masked.targets);
        // row offsets are fixed up once the padded width is known
        mlm_rows.extend(masked.positions.into_iter().map(|p| (student.len() - 1, p)));
    }
    if student.is_empty() {
        return None;
    }
    let student = TokenBatch::pad(&student);
    let mlm_rows = mlm_rows.into_iter().map(|(b, p): (usize, usize)| b * student.seq + p).collect();
    Some(PreparedBatch { student, teacher: TokenBatch::pad(&teacher), mlm_rows, mlm_targets, skipped })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Losses {
    pub distill: f64,
    pub mlm: f64,
    pub total: f64,
}

/// Gradients from one backward pass, indexed like their stores.
pub struct Gradients<T> {
    pub losses: Losses,
    pub student: Vec<Option<Matrix<T>>>,
    pub predictor: Vec<Option<Matrix<T>>>,
    /// Largest absolute gradient that reached any teacher parameter.
    pub teacher_max_abs: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub losses: Losses,
    pub teacher_grad_max_abs: f64,
    pub teacher_updated: bool,
    pub skipped: usize,
}

pub struct SelfTrainState<T: Scalar> {
    pub encoder_config: EncoderConfig,
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub student: ParamStore<T>,
    pub teacher: ParamStore<T>,
    pub predictor: PredictorHead,
    pub predictor_params: ParamStore<T>,
    pub step: usize,
    student_opt: Adam<T>,
    predictor_opt: Adam<T>,
}

impl<T: Scalar> SelfTrainState<T> {
    /// Fresh random initialization; the teacher starts as a copy of the student.
    pub fn new(mut encoder_config: EncoderConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self, PretrainError> {
        encoder_config.validate()?;
        let fp = tokenizer.fingerprint();
        if !encoder_config.vocab.is_empty() && encoder_config.vocab != fp {
            return Err(PretrainError::VocabMismatch { expected: encoder_config.vocab, found: fp });
        }
        encoder_config.vocab = fp;
        let mut init = rng::derived(seed, "pretrain/init");
        let mut student = ParamStore::new();
        let encoder = Encoder::new(&mut student, encoder_config.shape(tokenizer.len()), &mut init);
        let mut predictor_params = ParamStore::new();
        let h = encoder_config.hidden_dim;
        let predictor = PredictorHead::new(&mut predictor_params, h, PREDICTOR_MID, h, &mut init);
        Ok(Self::assemble(encoder_config, tokenizer, encoder, student, predictor, predictor_params, 0))
    }

    /// Rebuilds a state around loaded weights (teacher = student).
    pub fn from_parts(
        encoder_config: EncoderConfig,
        tokenizer: Tokenizer,
        student: ParamStore<T>,
        predictor_params: ParamStore<T>,
        step: usize,
    ) -> Result<Self, PretrainError> {
        let template = Self::new(encoder_config.clone(), tokenizer, 0)?;
        if template.student.max_abs_diff(&student).is_none() || template.predictor_params.max_abs_diff(&predictor_params).is_none() {
            return Err(PretrainError::InvalidEncoder("weights do not match the encoder layout".to_string()));
        }
        let Self { encoder_config, tokenizer, encoder, predictor, .. } = template;
        Ok(Self::assemble(encoder_config, tokenizer, encoder, student, predictor, predictor_params, step))
    }

    fn assemble(
        encoder_config: EncoderConfig,
        tokenizer: Tokenizer,
        encoder: Encoder,
        student: ParamStore<T>,
        predictor: PredictorHead,
        predictor_params: ParamStore<T>,
        step: usize,
    ) -> Self {
        let student_opt = Adam::new(&student);
        let predictor_opt = Adam::new(&predictor_params);
        let teacher = student.clone();
        Self { encoder_config, tokenizer, encoder, student, teacher, predictor, predictor_params, step, student_opt, predictor_opt }
    }

    fn forward_losses(&self, g: &mut Graph<T>, batch: &PreparedBatch, cfg: &TrainConfig, dropout_rng: Option<&mut Rng>) -> (Var, Var, Var) {
        let s = Bound::new(STUDENT, &self.student);
        let dropout = dropout_rng.map(|rng| Dropout { p: self.encoder_config.dropout, rng });
        let hidden = self.encoder.forward(g, s, &batch.student, dropout);
        let summary = self.encoder.summary(g, hidden, &batch.student);
        let pred = self.predictor.forward(g, Bound::new(PREDICTOR, &self.predictor_params), summary);

        let t_hidden = self.encoder.forward(g, Bound::new(TEACHER, &self.teacher), &batch.teacher, None);
        let t_summary = self.encoder.summary(g, t_hidden, &batch.teacher);
        let target = g.detach(t_summary);

        let distill = match cfg.distill_loss {
            DistillLoss::NegCosine => {
                let p = g.normalize_rows(pred);
                let t = g.normalize_rows(target);
                let cos = g.row_dot(p, t);
                let mean = g.mean(cos);
                g.affine(mean, -T::one(), T::one())
            }
            DistillLoss::Mse => {
                let diff = g.sub(pred, target);
                let sq = g.mul(diff, diff);
                g.mean(sq)
            }
        };
        let mlm = if batch.mlm_rows.is_empty() {
            g.constant(Matrix::scalar(T::zero()))
        } else {
            let logits = self.encoder.mlm_logits(g, s, hidden, &batch.mlm_rows);
            g.softmax_cross_entropy(logits, &batch.mlm_targets)
        };
        let weighted = g.scale(mlm, T::lit(cfg.mlm_weight));
        let total = g.add(distill, weighted);
        (distill, mlm, total)
    }

    fn read_losses(g: &Graph<T>, vars: (Var, Var, Var)) -> Losses {
        let f = |v: Var| g.value(v).item().to_f64().unwrap_or(f64::NAN);
        Losses { distill: f(vars.0), mlm: f(vars.1), total: f(vars.2) }
    }

    /// Losses without dropout and without touching any parameter.
    pub fn loss(&self, batch: &PreparedBatch, cfg: &TrainConfig) -> Losses {
        let mut g = Graph::new();
        let vars = self.forward_losses(&mut g, batch, cfg, None);
        Self::read_losses(&g, vars)
    }

    /// One forward/backward pass; dropout is active only when `dropout_rng` is given.
    pub fn gradients(&self, batch: &PreparedBatch, cfg: &TrainConfig, dropout_rng: Option<&mut Rng>) -> Gradients<T> {
        let mut g = Graph::new();
        let vars = self.forward_losses(&mut g, batch, cfg, dropout_rng);
        g.backward(vars.2);
        let collect = |slot: usize, n: usize| (0..n).map(|i| g.param_grad(slot, i).cloned()).collect::<Vec<_>>();
        let teacher_max_abs = (0..self.teacher.len())
            .filter_map(|i| g.param_grad(TEACHER, i))
            .map(|m| m.max_abs().to_f64().unwrap_or(f64::NAN))
            .fold(0.0, f64::max);
        Gradients {
            losses: Self::read_losses(&g, vars),
            student: collect(STUDENT, self.student.len()),
            predictor: collect(PREDICTOR, self.predictor_params.len()),
            teacher_max_abs,
        }
    }

    /// One optimizer step on student and predictor, then the teacher copy
    /// when the step count hits the update period.
    pub fn step_prepared(&mut self, batch: &PreparedBatch, cfg: &TrainConfig, rng: &mut Rng) -> StepReport {
        let grads = self.gradients(batch, cfg, Some(rng));
        let lr = cfg.schedule().lr(self.step + 1);
        self.student_opt.step(&mut self.student, &grads.student, lr);
        self.predictor_opt.step(&mut self.predictor_params, &grads.predictor, lr);
        self.step += 1;
        let teacher_updated = self.step % cfg.teacher_update_period == 0;
        if teacher_updated {
            self.teacher.copy_from(&self.student);
        }
        StepReport { step: self.step, losses: grads.losses, teacher_grad_max_abs: grads.teacher_max_abs, teacher_updated, skipped: batch.skipped }
    }

    /// Prepares and applies one step; `None` when every dialogue was skipped.
    pub fn self_train_step(&mut self, dialogues: &[&Dialogue], cfg: &TrainConfig, rng: &mut Rng) -> Option<StepReport> {
        let batch = prepare_batch(&self.tokenizer, dialogues, self.encoder_config.max_len, cfg.mask_ratio, rng)?;
        Some(self.step_prepared(&batch, cfg, rng))
    }

    fn encode_full(&self, d: &Dialogue) -> Vec<usize> {
        self.tokenizer.encode_turns_truncating(d.turns(), self.encoder_config.max_len)
    }

    /// Summary-token vector of the whole dialogue in eval mode.
    pub fn embed(&self, d: &Dialogue) -> Vec<T> {
        self.embed_turns(d.turns())
    }

    pub fn embed_turns(&self, turns: &[Utterance]) -> Vec<T> {
        let ids = self.tokenizer.encode_turns_truncating(turns, self.encoder_config.max_len);
        self.encoder.embed(&self.student, &[ids]).pop().expect("one sequence in, one vector out")
    }

    /// Masked-token perplexity over `dev`, with masks drawn from a fixed seed
    /// so successive evaluations are comparable.
    pub fn dev_perplexity(&self, dev: &[Dialogue], cfg: &TrainConfig) -> f64 {
        let mut rng = rng::derived(cfg.seed, "pretrain/dev-masks");
        let (mut nll, mut count) = (0.0, 0usize);
        for chunk in dev.chunks(cfg.batch_size.max(1)) {
            let mut seqs = Vec::with_capacity(chunk.len());
            let mut rows = Vec::new();
            let mut targets = Vec::new();
            for d in chunk {
                let m = mask_tokens(&self.encode_full(d), self.tokenizer.len(), cfg.mask_ratio, &mut rng);
                rows.extend(m.positions.iter().map(|&p| (seqs.len(), p)));
                targets.extend(m.targets);
                seqs.push(m.ids);
            }
            if targets.is_empty() {
                continue;
            }
            let batch = TokenBatch::pad(&seqs);
            let rows: Vec<usize> = rows.into_iter().map(|(b, p)| b * batch.seq + p).collect();
            let mut g = Graph::new();
            let s = Bound::new(STUDENT, &self.student);
            let hidden = self.encoder.forward(&mut g, s, &batch, None);
            let logits = self.encoder.mlm_logits(&mut g, s, hidden, &rows);
            let ce = g.softmax_cross_entropy(logits, &targets);
            nll += g.value(ce).item().to_f64().unwrap_or(f64::NAN) * targets.len() as f64;
            count += targets.len();
        }
        if count == 0 {
            return f64::NAN;
        }
        num_traits::Float::exp(nll / count as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub distill_loss: f64,
    pub mlm_loss: f64,
    pub total: f64,
    pub dev_ppl: Option<f64>,
}

pub struct TrainOutcome<T: Scalar> {
    pub state: SelfTrainState<T>,
    pub log: Vec<LogRow>,
    /// Student and predictor weights at the best dev evaluation.
    pub best: Option<(ParamStore<T>, ParamStore<T>)>,
    pub best_step: usize,
    pub best_dev_ppl: f64,
    pub early_stopped: bool,
}

/// Epochs of shuffled batches until `max_steps` or dev-perplexity patience
/// runs out.
pub fn train<T: Scalar>(mut state: SelfTrainState<T>, corpus: &Corpus, dev: &Corpus, cfg: &TrainConfig) -> Result<TrainOutcome<T>, PretrainError> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(PretrainError::InvalidTrain("training corpus is empty".to_string()));
    }
    if dev.is_empty() {
        return Err(PretrainError::InvalidTrain("dev corpus is empty".to_string()));
    }
    let mut log = Vec::new();
    let mut best = None;
    let (mut best_step, mut best_dev_ppl, mut early_stopped) = (0, f64::INFINITY, false);
    let mut rng = rng::derived(cfg.seed, "pretrain/train");
    let dialogues = corpus.dialogues();
    let mut order: Vec<usize> = (0..dialogues.len()).collect();
    let mut stale = 0;
    'epochs: while state.step < cfg.max_steps {
        order.shuffle(&mut rng);
        let mut progressed = false;
        for chunk in order.chunks(cfg.batch_size) {
            if state.step >= cfg.max_steps {
                break 'epochs;
            }
            let batch: Vec<&Dialogue> = chunk.iter().map(|&i| &dialogues[i]).collect();
            let Some(report) = state.self_train_step(&batch, cfg, &mut rng) else { continue };
            progressed = true;
            let mut row = LogRow {
                step: report.step,
                distill_loss: report.losses.distill,
                mlm_loss: report.losses.mlm,
                total: report.losses.total,
                dev_ppl: None,
            };
            if report.step % cfg.eval_every == 0 || report.step == cfg.max_steps {
                let ppl = state.dev_perplexity(dev.dialogues(), cfg);
                row.dev_ppl = Some(ppl);
                if ppl < best_dev_ppl {
                    best_dev_ppl = ppl;
                    best_step = report.step;
                    best = Some((state.student.clone(), state.predictor_params.clone()));
                    stale = 0;
                } else {
                    stale += 1;
                }
            }
            log.push(row);
            if stale >= cfg.patience.max(1) {
                early_stopped = true;
                break 'epochs;
            }
        }
        if !progressed {
            return Err(PretrainError::InvalidTrain("no dialogue in the corpus fits max_len".to_string()));
        }
    }
    Ok(TrainOutcome { state, log, best, best_step, best_dev_ppl, early_stopped })
}
