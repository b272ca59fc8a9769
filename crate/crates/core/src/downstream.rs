//! Fine-tuning heads for intent classification, state tracking, act
//! prediction and response retrieval, plus zero-shot embeddings.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Utterance};
use crate::gateway::{Backend, GatewayError};
use crate::metrics::{self, ClassificationMetrics, F1Scores, MetricError, StateAccuracy};
use crate::nn::{Bound, Dropout, Encoder, Linear, ParamStore, TokenBatch};
use crate::optim::{Adam, LinearSchedule};
use crate::pretrain::SelfTrainState;
use crate::rng::{self, Rng};
use crate::tensor::{Graph, Matrix, Scalar, Var};
use crate::tokenizer::Tokenizer;

const ENCODER: usize = 0;
const HEADS: usize = 1;
pub const POOL_SIZE: usize = 100;
pub const NONE_VALUE: &str = "none";

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum DownstreamError {
    #[error("data error: {0}")]
    Data(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntentExample {
    pub utterance: String,
    pub label: usize,
    #[serde(default)]
    pub is_ood: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DstExample {
    pub history: Vec<Utterance>,
    /// `"domain-slot"` to value; slots absent here are `"none"`.
    pub labels: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActExample {
    pub history: Vec<Utterance>,
    pub acts: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RsExample {
    pub history: Vec<Utterance>,
    pub gold_response: String,
    /// Act types of the gold response, used by diversity analysis.
    #[serde(default)]
    pub gold_acts: Vec<String>,
}

/// `"domain-slot"` to its value list, which always contains `"none"`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Ontology(pub BTreeMap<String, Vec<String>>);

impl Ontology {
    pub fn validate(&self) -> Result<(), DownstreamError> {
        for (slot, values) in &self.0 {
            if !values.iter().any(|v| v == NONE_VALUE) {
                return Err(DownstreamError::Data(format!("slot {slot} has no \"none\" value")));
            }
            if values.iter().collect::<BTreeSet<_>>().len() != values.len() {
                return Err(DownstreamError::Data(format!("slot {slot} lists a value twice")));
            }
        }
        Ok(())
    }

    pub fn slots(&self) -> impl Iterator<Item = (&String, &Vec<String>)> {
        self.0.iter()
    }

    /// Value index for every slot, defaulting to `"none"`.
    pub fn encode(&self, labels: &BTreeMap<String, String>) -> Result<Vec<usize>, DownstreamError> {
        if let Some(k) = labels.keys().find(|k| !self.0.contains_key(*k)) {
            return Err(DownstreamError::Data(format!("slot {k} is not in the ontology")));
        }
        self.0
            .iter()
            .map(|(slot, values)| {
                let v = labels.get(slot).map(String::as_str).unwrap_or(NONE_VALUE);
                values.iter().position(|x| x == v).ok_or_else(|| DownstreamError::Data(format!("value {v:?} not in ontology for {slot}")))
            })
            .collect()
    }

    pub fn decode(&self, indices: &[usize]) -> metrics::State {
        self.0.iter().zip(indices).map(|((slot, values), &i)| (slot.clone(), values[i].clone())).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Intent,
    Dst,
    Act,
    ResponseSelection,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Intent, Task::Dst, Task::Act, Task::ResponseSelection];

    pub fn name(self) -> &'static str {
        match self {
            Task::Intent => "intent",
            Task::Dst => "dst",
            Task::Act => "act",
            Task::ResponseSelection => "response_selection",
        }
    }

    pub fn parse(s: &str) -> Option<Task> {
        Task::ALL.into_iter().find(|t| t.name() == s)
    }

    pub fn default_batch_size(self) -> usize {
        match self {
            Task::Intent => 8,
            Task::Dst => 25,
            Task::Act => 16,
            Task::ResponseSelection => 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FineTuneConfig {
    pub task: Task,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub eval_every_steps: usize,
    /// Evaluations without dev improvement before stopping.
    pub patience: usize,
    /// Act activation threshold on sigmoid outputs.
    pub threshold: f64,
    pub seed: u64,
    /// Hard cap on optimizer steps; `0` means no cap.
    #[serde(default)]
    pub max_steps: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl FineTuneConfig {
    pub fn for_task(task: Task) -> Self {
        Self {
            task,
            batch_size: task.default_batch_size(),
            lr: 5e-5,
            epochs: 50,
            eval_every_steps: 100,
            patience: 10,
            threshold: 0.5,
            seed: 0,
            max_steps: 0,
            dropout: 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), DownstreamError> {
        let bad = |m: &str| Err(DownstreamError::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.task == Task::ResponseSelection && self.batch_size < 2 {
            return bad("response selection needs batch_size >= 2 for in-batch negatives");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr must be positive");
        }
        if self.eval_every_steps == 0 {
            return bad("eval_every_steps must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        Ok(())
    }

    fn step_budget(&self, examples: usize) -> usize {
        let per_epoch = examples.div_ceil(self.batch_size);
        let total = per_epoch * self.epochs;
        if self.max_steps == 0 {
            total
        } else {
            total.min(self.max_steps)
        }
    }
}

/// Encoder copy plus task heads over its summary vector.
pub struct TaskModel<T: Scalar> {
    pub tokenizer: Tokenizer,
    pub encoder: Encoder,
    pub max_len: usize,
    pub params: ParamStore<T>,
    pub heads: Vec<Linear>,
    pub head_params: ParamStore<T>,
}

impl<T: Scalar> TaskModel<T> {
    /// One linear head of width `dims[i]` per entry.
    pub fn from_state(state: &SelfTrainState<T>, dims: &[usize], seed: u64) -> Self {
        let mut r = rng::derived(seed, "downstream/heads");
        let mut head_params = ParamStore::new();
        let hidden = state.encoder.shape.hidden;
        let heads = dims.iter().enumerate().map(|(i, &d)| Linear::new(&mut head_params, &format!("head{i}"), hidden, d, &mut r)).collect();
        Self {
            tokenizer: state.tokenizer.clone(),
            encoder: state.encoder.clone(),
            max_len: state.encoder_config.max_len,
            params: state.student.clone(),
            heads,
            head_params,
        }
    }

    pub fn encode(&self, turns: &[Utterance]) -> Vec<usize> {
        self.tokenizer.encode_turns_truncating(turns, self.max_len)
    }

    fn summaries(&self, g: &mut Graph<T>, seqs: &[Vec<usize>], dropout: Option<Dropout<'_>>) -> Var {
        let batch = TokenBatch::pad(seqs);
        let h = self.encoder.forward(g, Bound::new(ENCODER, &self.params), &batch, dropout);
        self.encoder.summary(g, h, &batch)
    }

    fn head(&self, g: &mut Graph<T>, summary: Var, i: usize) -> Var {
        self.heads[i].forward(g, Bound::new(HEADS, &self.head_params), summary)
    }

    /// Eval-mode outputs of every head, `[head][example][unit]`.
    pub fn head_outputs(&self, seqs: &[Vec<usize>]) -> Vec<Vec<Vec<f64>>> {
        let mut out: Vec<Vec<Vec<f64>>> = vec![Vec::new(); self.heads.len()];
        for chunk in seqs.chunks(64) {
            let mut g = Graph::new();
            let s = self.summaries(&mut g, chunk, None);
            for (i, o) in out.iter_mut().enumerate() {
                let logits = self.head(&mut g, s, i);
                let m = g.value(logits);
                o.extend((0..m.rows()).map(|r| m.row(r).iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()));
            }
        }
        out
    }

    /// Eval-mode summary vectors.
    pub fn embed(&self, seqs: &[Vec<usize>]) -> Vec<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for chunk in seqs.chunks(64) {
            out.extend(self.encoder.embed(&self.params, chunk).into_iter().map(|v| v.iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()));
        }
        out
    }
}

/// What happened during [`fit`].
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FitLog {
    pub steps: usize,
    pub losses: Vec<f64>,
    /// `(step, dev metric)` per evaluation.
    pub evals: Vec<(usize, f64)>,
    pub best_step: usize,
    pub best_dev: Option<f64>,
    pub early_stopped: bool,
}

/// Shared fine-tuning loop. `loss` builds the batch loss on the graph;
/// `dev_metric` scores the model (higher is better). The best dev snapshot
/// is restored at the end.
fn fit<T: Scalar>(
    model: &mut TaskModel<T>,
    n_train: usize,
    cfg: &FineTuneConfig,
    mut loss: impl FnMut(&TaskModel<T>, &mut Graph<T>, &[usize], Option<Dropout<'_>>) -> Var,
    mut dev_metric: Option<&mut dyn FnMut(&TaskModel<T>) -> f64>,
) -> FitLog {
    let mut log = FitLog::default();
    let budget = cfg.step_budget(n_train);
    let schedule = LinearSchedule { peak: cfg.lr, warmup: 0, total: budget };
    let mut enc_opt = Adam::new(&model.params);
    let mut head_opt = Adam::new(&model.head_params);
    let mut r = rng::derived(cfg.seed, &format!("downstream/{}", cfg.task.name()));
    let mut order: Vec<usize> = (0..n_train).collect();
    let mut best: Option<(ParamStore<T>, ParamStore<T>)> = None;
    let mut stale = 0;
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut r);
        for chunk in order.chunks(cfg.batch_size) {
            if log.steps >= budget {
                break 'outer;
            }
            let mut g = Graph::new();
            let dropout = (cfg.dropout > 0.0).then(|| Dropout { p: cfg.dropout, rng: &mut r });
            let l = loss(model, &mut g, chunk, dropout);
            g.backward(l);
            log.losses.push(g.value(l).item().to_f64().unwrap_or(f64::NAN));
            let grads = |slot: usize, n: usize| (0..n).map(|i| g.param_grad(slot, i).cloned()).collect::<Vec<_>>();
            let lr = schedule.lr(log.steps + 1);
            let (enc_grads, head_grads) = (grads(ENCODER, model.params.len()), grads(HEADS, model.head_params.len()));
            enc_opt.step(&mut model.params, &enc_grads, lr);
            head_opt.step(&mut model.head_params, &head_grads, lr);
            log.steps += 1;
            let Some(metric) = dev_metric.as_deref_mut() else { continue };
            if log.steps % cfg.eval_every_steps != 0 && log.steps != budget {
                continue;
            }
            let m = metric(model);
            log.evals.push((log.steps, m));
            if log.best_dev.is_none_or(|b| m > b) {
                log.best_dev = Some(m);
                log.best_step = log.steps;
                best = Some((model.params.clone(), model.head_params.clone()));
                stale = 0;
            } else {
                stale += 1;
                if stale >= cfg.patience.max(1) {
                    log.early_stopped = true;
                    break 'outer;
                }
            }
        }
    }
    if let Some((p, h)) = best {
        model.params = p;
        model.head_params = h;
    }
    log
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub struct IntentClassifier<T: Scalar> {
    pub model: TaskModel<T>,
    pub num_classes: usize,
    pub ood_class: Option<usize>,
}

impl<T: Scalar> IntentClassifier<T> {
    fn seqs(&self, xs: &[IntentExample]) -> Vec<Vec<usize>> {
        xs.iter().map(|x| self.model.encode(&[Utterance::user(x.utterance.clone())])).collect()
    }

    pub fn predict(&self, xs: &[IntentExample]) -> Vec<usize> {
        self.model.head_outputs(&self.seqs(xs)).swap_remove(0).iter().map(|r| argmax(r)).collect()
    }

    /// Full intent metrics when an OOD class exists, otherwise plain accuracy
    /// in every in-domain field.
    pub fn evaluate(&self, xs: &[IntentExample]) -> Result<ClassificationMetrics, DownstreamError> {
        let preds = self.predict(xs);
        let golds: Vec<usize> = xs.iter().map(|x| x.label).collect();
        match self.ood_class {
            Some(ood) if golds.contains(&ood) => Ok(metrics::classification_metrics(&preds, &golds, ood)?),
            _ => {
                let acc = metrics::accuracy(&preds, &golds)?;
                Ok(ClassificationMetrics { acc_all: acc, acc_in: acc, acc_out: f64::NAN, recall_out: f64::NAN })
            }
        }
    }
}

fn check_intents(xs: &[IntentExample], num_classes: usize, ood: &mut Option<usize>) -> Result<(), DownstreamError> {
    for x in xs {
        if x.label >= num_classes {
            return Err(DownstreamError::Data(format!("intent label {} outside 0..{num_classes}", x.label)));
        }
        if x.is_ood {
            match *ood {
                None => *ood = Some(x.label),
                Some(o) if o != x.label => return Err(DownstreamError::Data("out-of-domain examples use more than one label".to_string())),
                _ => {}
            }
        }
    }
    Ok(())
}

/// Linear head over the summary vector, trained with cross-entropy.
pub fn finetune_intent<T: Scalar>(
    state: &SelfTrainState<T>,
    train: &[IntentExample],
    dev: &[IntentExample],
    num_classes: usize,
    cfg: &FineTuneConfig,
) -> Result<(IntentClassifier<T>, FitLog), DownstreamError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(DownstreamError::Data("empty training set".to_string()));
    }
    let mut ood_class = None;
    check_intents(train, num_classes, &mut ood_class)?;
    check_intents(dev, num_classes, &mut ood_class)?;
    let mut clf = IntentClassifier { model: TaskModel::from_state(state, &[num_classes], cfg.seed), num_classes, ood_class };
    let seqs = clf.seqs(train);
    let labels: Vec<usize> = train.iter().map(|x| x.label).collect();
    let dev_seqs = clf.seqs(dev);
    let dev_labels: Vec<usize> = dev.iter().map(|x| x.label).collect();
    let mut metric = |m: &TaskModel<T>| {
        let preds: Vec<usize> = m.head_outputs(&dev_seqs).swap_remove(0).iter().map(|r| argmax(r)).collect();
        metrics::accuracy(&preds, &dev_labels).unwrap_or(0.0)
    };
    let loss = |m: &TaskModel<T>, g: &mut Graph<T>, idx: &[usize], d: Option<Dropout<'_>>| {
        let batch: Vec<Vec<usize>> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let s = m.summaries(g, &batch, d);
        let logits = m.head(g, s, 0);
        let targets: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        g.softmax_cross_entropy(logits, &targets)
    };
    let dev_metric: Option<&mut dyn FnMut(&TaskModel<T>) -> f64> = if dev.is_empty() { None } else { Some(&mut metric) };
    let log = fit(&mut clf.model, train.len(), cfg, loss, dev_metric);
    Ok((clf, log))
}

pub struct StateTracker<T: Scalar> {
    pub model: TaskModel<T>,
    pub ontology: Ontology,
}

impl<T: Scalar> StateTracker<T> {
    pub fn predict(&self, xs: &[DstExample]) -> Vec<metrics::State> {
        let seqs: Vec<Vec<usize>> = xs.iter().map(|x| self.model.encode(&x.history)).collect();
        let outs = self.model.head_outputs(&seqs);
        (0..xs.len()).map(|e| self.ontology.decode(&outs.iter().map(|h| argmax(&h[e])).collect::<Vec<_>>())).collect()
    }

    pub fn evaluate(&self, xs: &[DstExample]) -> Result<StateAccuracy, DownstreamError> {
        let golds: Vec<metrics::State> = xs.iter().map(|x| self.ontology.encode(&x.labels).map(|i| self.ontology.decode(&i))).collect::<Result<_, _>>()?;
        Ok(metrics::joint_and_slot_accuracy(&self.predict(xs), &golds)?)
    }
}

/// One head per slot over that slot's values; the loss sums the per-slot
/// cross-entropies.
pub fn finetune_dst<T: Scalar>(
    state: &SelfTrainState<T>,
    train: &[DstExample],
    dev: &[DstExample],
    ontology: &Ontology,
    cfg: &FineTuneConfig,
) -> Result<(StateTracker<T>, FitLog), DownstreamError> {
    cfg.validate()?;
    ontology.validate()?;
    if train.is_empty() {
        return Err(DownstreamError::Data("empty training set".to_string()));
    }
    let targets: Vec<Vec<usize>> = train.iter().map(|x| ontology.encode(&x.labels)).collect::<Result<_, _>>()?;
    let dev_golds: Vec<metrics::State> = dev.iter().map(|x| ontology.encode(&x.labels).map(|i| ontology.decode(&i))).collect::<Result<_, _>>()?;
    let dims: Vec<usize> = ontology.slots().map(|(_, v)| v.len()).collect();
    let mut tracker = StateTracker { model: TaskModel::from_state(state, &dims, cfg.seed), ontology: ontology.clone() };
    let seqs: Vec<Vec<usize>> = train.iter().map(|x| tracker.model.encode(&x.history)).collect();
    let dev_seqs: Vec<Vec<usize>> = dev.iter().map(|x| tracker.model.encode(&x.history)).collect();
    let n_slots = dims.len();
    let mut metric = |m: &TaskModel<T>| {
        let outs = m.head_outputs(&dev_seqs);
        let preds: Vec<metrics::State> = (0..dev_seqs.len()).map(|e| ontology.decode(&outs.iter().map(|h| argmax(&h[e])).collect::<Vec<_>>())).collect();
        metrics::joint_and_slot_accuracy(&preds, &dev_golds).map(|a| a.joint).unwrap_or(0.0)
    };
    let loss = |m: &TaskModel<T>, g: &mut Graph<T>, idx: &[usize], d: Option<Dropout<'_>>| {
        let batch: Vec<Vec<usize>> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let s = m.summaries(g, &batch, d);
        let mut total = g.constant(Matrix::scalar(T::zero()));
        for slot in 0..n_slots {
            let logits = m.head(g, s, slot);
            let t: Vec<usize> = idx.iter().map(|&i| targets[i][slot]).collect();
            let ce = g.softmax_cross_entropy(logits, &t);
            total = g.add(total, ce);
        }
        total
    };
    let dev_metric: Option<&mut dyn FnMut(&TaskModel<T>) -> f64> = if dev.is_empty() { None } else { Some(&mut metric) };
    let log = fit(&mut tracker.model, train.len(), cfg, loss, dev_metric);
    Ok((tracker, log))
}

pub struct ActPredictor<T: Scalar> {
    pub model: TaskModel<T>,
    pub num_acts: usize,
    pub threshold: f64,
}

impl<T: Scalar> ActPredictor<T> {
    /// Sigmoid scores per act.
    pub fn scores(&self, xs: &[ActExample]) -> Vec<Vec<f64>> {
        let seqs: Vec<Vec<usize>> = xs.iter().map(|x| self.model.encode(&x.history)).collect();
        self.model.head_outputs(&seqs).swap_remove(0).into_iter().map(|r| r.into_iter().map(sigmoid).collect()).collect()
    }

    pub fn predict(&self, xs: &[ActExample]) -> Vec<BTreeSet<usize>> {
        self.scores(xs).iter().map(|s| metrics::active_labels(s, self.threshold)).collect()
    }

    pub fn evaluate(&self, xs: &[ActExample]) -> Result<F1Scores, DownstreamError> {
        let golds: Vec<BTreeSet<usize>> = xs.iter().map(|x| act_set(&x.acts)).collect();
        Ok(metrics::f1_scores(&self.predict(xs), &golds, self.num_acts)?)
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + num_traits::Float::exp(-z))
}

fn act_set(acts: &[bool]) -> BTreeSet<usize> {
    acts.iter().enumerate().filter(|(_, &a)| a).map(|(i, _)| i).collect()
}

/// Multi-label head trained with binary cross-entropy over every act.
pub fn finetune_act<T: Scalar>(
    state: &SelfTrainState<T>,
    train: &[ActExample],
    dev: &[ActExample],
    cfg: &FineTuneConfig,
) -> Result<(ActPredictor<T>, FitLog), DownstreamError> {
    cfg.validate()?;
    let Some(first) = train.first() else {
        return Err(DownstreamError::Data("empty training set".to_string()));
    };
    let num_acts = first.acts.len();
    if num_acts == 0 || train.iter().chain(dev).any(|x| x.acts.len() != num_acts) {
        return Err(DownstreamError::Data("act vectors must share one non-zero length".to_string()));
    }
    let mut pred = ActPredictor { model: TaskModel::from_state(state, &[num_acts], cfg.seed), num_acts, threshold: cfg.threshold };
    let seqs: Vec<Vec<usize>> = train.iter().map(|x| pred.model.encode(&x.history)).collect();
    let dev_seqs: Vec<Vec<usize>> = dev.iter().map(|x| pred.model.encode(&x.history)).collect();
    let dev_golds: Vec<BTreeSet<usize>> = dev.iter().map(|x| act_set(&x.acts)).collect();
    let threshold = cfg.threshold;
    let mut metric = |m: &TaskModel<T>| {
        let preds: Vec<BTreeSet<usize>> = m
            .head_outputs(&dev_seqs)
            .swap_remove(0)
            .iter()
            .map(|r| metrics::active_labels(&r.iter().map(|&z| sigmoid(z)).collect::<Vec<_>>(), threshold))
            .collect();
        metrics::f1_scores(&preds, &dev_golds, num_acts).map(|f| f.micro).unwrap_or(0.0)
    };
    let loss = |m: &TaskModel<T>, g: &mut Graph<T>, idx: &[usize], d: Option<Dropout<'_>>| {
        let batch: Vec<Vec<usize>> = idx.iter().map(|&i| seqs[i].clone()).collect();
        let s = m.summaries(g, &batch, d);
        let logits = m.head(g, s, 0);
        let t = Matrix::from_fn(idx.len(), num_acts, |r, c| if train[idx[r]].acts[c] { T::one() } else { T::zero() });
        g.bce_with_logits(logits, t)
    };
    let dev_metric: Option<&mut dyn FnMut(&TaskModel<T>) -> f64> = if dev.is_empty() { None } else { Some(&mut metric) };
    let log = fit(&mut pred.model, train.len(), cfg, loss, dev_metric);
    Ok((pred, log))
}

/// In-batch softmax cross-entropy over cosine similarities divided by
/// `temperature`; row `i` of `responses` is the positive for history `i`.
pub fn dual_encoder_loss<T: Scalar>(g: &mut Graph<T>, histories: Var, responses: Var, temperature: f64) -> Var {
    let h = g.normalize_rows(histories);
    let r = g.normalize_rows(responses);
    let sims = g.matmul_t(h, r);
    let logits = g.scale(sims, T::lit(1.0 / temperature));
    let n = g.value(logits).rows();
    let targets: Vec<usize> = (0..n).collect();
    g.softmax_cross_entropy(logits, &targets)
}

pub struct DualEncoder<T: Scalar> {
    pub model: TaskModel<T>,
}

impl<T: Scalar> DualEncoder<T> {
    pub fn embed_histories(&self, histories: &[&[Utterance]]) -> Vec<Vec<f64>> {
        self.model.embed(&histories.iter().map(|h| self.model.encode(h)).collect::<Vec<_>>())
    }

    pub fn embed_responses<S: AsRef<str>>(&self, responses: &[S]) -> Vec<Vec<f64>> {
        self.model.embed(&responses.iter().map(|r| self.model.encode(&[Utterance::system(r.as_ref())])).collect::<Vec<_>>())
    }

    pub fn relevance(&self, history: &[Utterance], response: &str) -> f64 {
        let h = self.embed_histories(&[history]);
        let r = self.embed_responses(&[response]);
        cosine(&h[0], &r[0])
    }
}

/// Shared-encoder retrieval model trained with in-batch negatives at
/// temperature 1. A trailing batch of one example is folded away.
pub fn train_dual_encoder<T: Scalar>(
    state: &SelfTrainState<T>,
    train: &[RsExample],
    dev: &[RsExample],
    cfg: &FineTuneConfig,
) -> Result<(DualEncoder<T>, FitLog), DownstreamError> {
    if cfg.batch_size < 2 {
        return Err(DownstreamError::Config("dual encoder needs batch_size >= 2 for in-batch negatives".to_string()));
    }
    cfg.validate()?;
    if train.len() < 2 {
        return Err(DownstreamError::Data("dual encoder needs at least two training pairs".to_string()));
    }
    if let Some(x) = train.iter().chain(dev).find(|x| x.gold_response.trim().is_empty()) {
        return Err(DownstreamError::Data(format!("empty gold response after history of {} turns", x.history.len())));
    }
    let mut de = DualEncoder { model: TaskModel::from_state(state, &[], cfg.seed) };
    let enc = |m: &TaskModel<T>, xs: &[RsExample]| -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
        (xs.iter().map(|x| m.encode(&x.history)).collect(), xs.iter().map(|x| m.encode(&[Utterance::system(x.gold_response.clone())])).collect())
    };
    let (hs, rs) = enc(&de.model, train);
    let (dev_h, dev_r) = enc(&de.model, dev);
    let bs = cfg.batch_size;
    let mut metric = |m: &TaskModel<T>| {
        let mut total = 0.0;
        let mut n = 0;
        for (hc, rc) in dev_h.chunks(bs).zip(dev_r.chunks(bs)) {
            if hc.len() < 2 {
                continue;
            }
            let mut g = Graph::new();
            let h = m.summaries(&mut g, hc, None);
            let r = m.summaries(&mut g, rc, None);
            let l = dual_encoder_loss(&mut g, h, r, 1.0);
            total += g.value(l).item().to_f64().unwrap_or(f64::NAN) * hc.len() as f64;
            n += hc.len();
        }
        if n == 0 {
            0.0
        } else {
            -total / n as f64
        }
    };
    let loss = |m: &TaskModel<T>, g: &mut Graph<T>, idx: &[usize], mut d: Option<Dropout<'_>>| {
        let mut idx = idx.to_vec();
        if idx.len() < 2 {
            // pair the straggler with a neighbour so it still has a negative
            idx.push((idx[0] + 1) % hs.len());
        }
        let hb: Vec<Vec<usize>> = idx.iter().map(|&i| hs[i].clone()).collect();
        let rb: Vec<Vec<usize>> = idx.iter().map(|&i| rs[i].clone()).collect();
        let h = m.summaries(g, &hb, d.as_mut().map(|d| Dropout { p: d.p, rng: &mut *d.rng }));
        let r = m.summaries(g, &rb, d);
        dual_encoder_loss(g, h, r, 1.0)
    };
    let dev_metric: Option<&mut dyn FnMut(&TaskModel<T>) -> f64> = if dev.len() < 2 { None } else { Some(&mut metric) };
    let log = fit(&mut de.model, train.len(), cfg, loss, dev_metric);
    Ok((de, log))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = num_traits::Float::sqrt(a.iter().map(|x| x * x).sum::<f64>());
    let nb = num_traits::Float::sqrt(b.iter().map(|x| x * x).sum::<f64>());
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KAccuracy {
    pub ks: Vec<usize>,
    pub accuracies: Vec<f64>,
    pub ranks: Vec<usize>,
}

/// Distinct responses in first-seen order.
pub fn distinct_responses<'a>(responses: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    responses.into_iter().filter(|r| seen.insert(*r)).map(ToString::to_string).collect()
}

/// Ranks each gold among itself plus 99 distinct non-gold candidates drawn
/// uniformly from `candidates` (one derived rng per example). Gold sits at
/// pool index 0, so exact ties favour it.
pub fn evaluate_k_to_100_embeddings(
    histories: &[Vec<f64>],
    golds: &[usize],
    candidates: &[Vec<f64>],
    ks: &[usize],
    seed: u64,
) -> Result<KAccuracy, DownstreamError> {
    if candidates.len() < POOL_SIZE {
        return Err(DownstreamError::Data(format!("need {} distinct candidates, have {}", POOL_SIZE, candidates.len())));
    }
    if histories.len() != golds.len() || golds.iter().any(|&g| g >= candidates.len()) {
        return Err(DownstreamError::Data("gold indices do not line up with the candidate list".to_string()));
    }
    let mut ranks = Vec::with_capacity(golds.len());
    for (e, (h, &gold)) in histories.iter().zip(golds).enumerate() {
        let mut r = rng::derived(seed, &format!("k-to-100/{e}"));
        let mut scores = Vec::with_capacity(POOL_SIZE);
        scores.push(cosine(h, &candidates[gold]));
        // draw from the candidates with the gold removed
        for i in index::sample(&mut r, candidates.len() - 1, POOL_SIZE - 1) {
            let c = if i >= gold { i + 1 } else { i };
            scores.push(cosine(h, &candidates[c]));
        }
        ranks.push(metrics::gold_rank(&scores));
    }
    Ok(KAccuracy { ks: ks.to_vec(), accuracies: metrics::accuracy_at_k(&ranks, ks), ranks })
}

/// k-to-100 evaluation with the candidate pool drawn from `pool` (e.g. all
/// system responses of the test corpus).
pub fn evaluate_k_to_100<T: Scalar>(model: &DualEncoder<T>, test: &[RsExample], pool: &[String], ks: &[usize], seed: u64) -> Result<KAccuracy, DownstreamError> {
    let candidates = distinct_responses(pool.iter().map(String::as_str).chain(test.iter().map(|x| x.gold_response.as_str())));
    let golds: Vec<usize> = test.iter().map(|x| candidates.iter().position(|c| *c == x.gold_response).expect("gold added above")).collect();
    let histories: Vec<&[Utterance]> = test.iter().map(|x| x.history.as_slice()).collect();
    let h = model.embed_histories(&histories);
    let c = model.embed_responses(&candidates);
    evaluate_k_to_100_embeddings(&h, &golds, &c, ks, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Encoder,
    Decoder,
}

/// A model whose hidden states can be read directly.
pub enum EmbedSource<'a, T: Scalar> {
    State(&'a SelfTrainState<T>),
    Backend(&'a dyn Backend),
}

/// Embedding without fine-tuning: the summary position for encoders, the
/// last position for decoders.
pub fn zero_shot_embed<T: Scalar>(source: &EmbedSource<'_, T>, turns: &[Utterance], arch: Arch) -> Result<Vec<f64>, DownstreamError> {
    match source {
        EmbedSource::State(s) => {
            let ids = s.tokenizer.encode_turns_truncating(turns, s.encoder_config.max_len);
            let seqs = [ids];
            let v = match arch {
                Arch::Encoder => s.encoder.embed(&s.student, &seqs),
                Arch::Decoder => s.encoder.embed_last(&s.student, &seqs),
            };
            Ok(v[0].iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect())
        }
        EmbedSource::Backend(b) => {
            if !b.capabilities().supports_hidden_states {
                return Err(GatewayError::Capability("hidden states").into());
            }
            let text = crate::corpus::SerializedDialogue::from_turns(turns).text;
            Ok(b.hidden_state(&text)?.into_iter().map(f64::from).collect())
        }
    }
}

/// Zero-shot embedding of a whole dialogue.
pub fn zero_shot_embed_dialogue<T: Scalar>(source: &EmbedSource<'_, T>, d: &Dialogue, arch: Arch) -> Result<Vec<f64>, DownstreamError> {
    zero_shot_embed(source, d.turns(), arch)
}

/// Top-`k` candidate indices by cosine similarity, best first, ties to the
/// lower index.
pub fn top_k(query: &[f64], candidates: &[Vec<f64>], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = candidates.iter().enumerate().map(|(i, c)| (i, cosine(query, c))).collect();
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap_or(core::cmp::Ordering::Equal).then(a.0.cmp(&b.0)));
    scored.into_iter().take(k).map(|(i, _)| i).collect()
}

/// Random generator for tests and synthetic fixtures.
pub fn fixture_rng(seed: u64) -> Rng {
    rng::derived(seed, "downstream/fixture")
}
