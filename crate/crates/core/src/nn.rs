//! Parameter storage and the transformer encoder built on the tape.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use alloc::format;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;
use crate::tensor::{Graph, Matrix, Scalar, Var};
use crate::tokenizer::PAD;

const LN_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
const SQRT_3: f64 = 1.732_050_807_568_877_2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Named, ordered parameter tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    values: Vec<Matrix<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new() }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix<T>) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Uniform init with standard deviation [`INIT_STD`].
    pub fn add_random(&mut self, name: impl Into<String>, rows: usize, cols: usize, rng: &mut Rng) -> ParamId {
        // uniform on [-a, a] has standard deviation a / sqrt(3)
        let a = INIT_STD * SQRT_3;
        let m = Matrix::from_fn(rows, cols, |_, _| T::lit(rng.random_range(-a..a)));
        self.add(name, m)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix<T> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix<T> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix<T>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore { names: self.names.clone(), values: self.values.iter().map(Matrix::cast).collect() }
    }

    /// Largest absolute elementwise difference; `None` if layouts differ.
    pub fn max_abs_diff(&self, other: &ParamStore<T>) -> Option<T> {
        if self.names != other.names {
            return None;
        }
        let mut max = T::zero();
        for (a, b) in self.values.iter().zip(&other.values) {
            if a.shape() != b.shape() {
                return None;
            }
            for (&x, &y) in a.as_slice().iter().zip(b.as_slice()) {
                max = max.max((x - y).abs());
            }
        }
        Some(max)
    }

    /// Bitwise equality of every tensor.
    pub fn bit_identical(&self, other: &ParamStore<T>) -> bool {
        self.names == other.names
            && self.values.iter().zip(&other.values).all(|(a, b)| {
                a.shape() == b.shape() && a.as_slice().iter().zip(b.as_slice()).all(|(x, y)| x.to_f64().map(f64::to_bits) == y.to_f64().map(f64::to_bits))
            })
    }

    /// Overwrites every tensor with the corresponding one from `other`.
    pub fn copy_from(&mut self, other: &ParamStore<T>) {
        assert_eq!(self.names, other.names, "parameter layouts differ");
        self.values.clone_from(&other.values);
    }
}

/// Binds a [`ParamStore`] to a slot on a graph.
#[derive(Clone, Copy)]
pub struct Bound<'s, T> {
    pub slot: usize,
    pub store: &'s ParamStore<T>,
}

impl<'s, T: Scalar> Bound<'s, T> {
    pub fn new(slot: usize, store: &'s ParamStore<T>) -> Self {
        Self { slot, store }
    }

    pub fn var(&self, g: &mut Graph<T>, id: ParamId) -> Var {
        g.param(self.slot, id.0, self.store.get(id))
    }
}

/// Dropout masks drawn from a seeded rng; `None` means evaluation mode.
pub struct Dropout<'r> {
    pub p: f64,
    pub rng: &'r mut Rng,
}

impl Dropout<'_> {
    pub fn apply<T: Scalar>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        if self.p <= 0.0 {
            return x;
        }
        let keep = T::lit(1.0 / (1.0 - self.p));
        let n = g.value(x).len();
        let mask = (0..n).map(|_| if self.rng.random::<f64>() < self.p { T::zero() } else { keep }).collect();
        g.dropout(x, mask)
    }
}

fn maybe_dropout<T: Scalar>(g: &mut Graph<T>, x: Var, dropout: &mut Option<Dropout<'_>>) -> Var {
    match dropout {
        Some(d) => d.apply(g, x),
        None => x,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, input: usize, output: usize, rng: &mut Rng) -> Self {
        let weight = store.add_random(format!("{name}.weight"), input, output, rng);
        let bias = store.add(format!("{name}.bias"), Matrix::zeros(1, output));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Var {
        let w = p.var(g, self.weight);
        let b = p.var(g, self.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Matrix::filled(1, dim, T::one()));
        let beta = store.add(format!("{name}.beta"), Matrix::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Var {
        let gamma = p.var(g, self.gamma);
        let beta = p.var(g, self.beta);
        g.layer_norm(x, gamma, beta, T::lit(LN_EPS))
    }
}

/// Shape of the encoder network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderShape {
    pub vocab: usize,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: usize,
    pub max_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Block {
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    attn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
    ffn_norm: LayerNorm,
}

/// Post-norm BERT-style encoder with a tied masked-token head.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Encoder {
    pub shape: EncoderShape,
    token_embedding: ParamId,
    position_embedding: ParamId,
    embedding_norm: LayerNorm,
    blocks: Vec<Block>,
    mlm_transform: Linear,
    mlm_norm: LayerNorm,
    mlm_bias: ParamId,
}

/// Padded token ids for a batch, `batch * seq` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenBatch {
    pub ids: Vec<usize>,
    pub batch: usize,
    pub seq: usize,
    /// Length of each sequence before padding.
    pub lengths: Vec<usize>,
}

impl TokenBatch {
    /// Pads every sequence to the longest one.
    pub fn pad(seqs: &[Vec<usize>]) -> Self {
        let seq = seqs.iter().map(Vec::len).max().unwrap_or(0).max(1);
        let mut ids = vec![PAD; seqs.len() * seq];
        for (b, s) in seqs.iter().enumerate() {
            ids[b * seq..b * seq + s.len()].copy_from_slice(s);
        }
        Self { ids, batch: seqs.len(), seq, lengths: seqs.iter().map(Vec::len).collect() }
    }

    pub fn key_valid(&self) -> Vec<bool> {
        let mut v = vec![false; self.ids.len()];
        for (b, &len) in self.lengths.iter().enumerate() {
            v[b * self.seq..b * self.seq + len].iter_mut().for_each(|x| *x = true);
        }
        v
    }

    /// Flat row index of the summary token of each sequence.
    pub fn cls_rows(&self) -> Vec<usize> {
        (0..self.batch).map(|b| b * self.seq).collect()
    }

    /// Flat row index of the last real token of each sequence.
    pub fn last_rows(&self) -> Vec<usize> {
        self.lengths.iter().enumerate().map(|(b, &len)| b * self.seq + len.saturating_sub(1)).collect()
    }
}

impl Encoder {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, shape: EncoderShape, rng: &mut Rng) -> Self {
        assert!(shape.hidden % shape.heads == 0, "hidden must be divisible by heads");
        let h = shape.hidden;
        let token_embedding = store.add_random("embeddings.token", shape.vocab, h, rng);
        let position_embedding = store.add_random("embeddings.position", shape.max_len, h, rng);
        let embedding_norm = LayerNorm::new(store, "embeddings.norm", h);
        let blocks = (0..shape.layers)
            .map(|l| {
                let n = |s: &str| format!("layer{l}.{s}");
                Block {
                    query: Linear::new(store, &n("attn.query"), h, h, rng),
                    key: Linear::new(store, &n("attn.key"), h, h, rng),
                    value: Linear::new(store, &n("attn.value"), h, h, rng),
                    attn_out: Linear::new(store, &n("attn.out"), h, h, rng),
                    attn_norm: LayerNorm::new(store, &n("attn.norm"), h),
                    ffn_in: Linear::new(store, &n("ffn.in"), h, shape.ffn, rng),
                    ffn_out: Linear::new(store, &n("ffn.out"), shape.ffn, h, rng),
                    ffn_norm: LayerNorm::new(store, &n("ffn.norm"), h),
                }
            })
            .collect();
        let mlm_transform = Linear::new(store, "mlm.transform", h, h, rng);
        let mlm_norm = LayerNorm::new(store, "mlm.norm", h);
        let mlm_bias = store.add("mlm.bias", Matrix::zeros(1, shape.vocab));
        Self { shape, token_embedding, position_embedding, embedding_norm, blocks, mlm_transform, mlm_norm, mlm_bias }
    }

    /// Hidden states for every position, `(batch * seq) x hidden`.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, batch: &TokenBatch, mut dropout: Option<Dropout<'_>>) -> Var {
        assert!(batch.seq <= self.shape.max_len, "sequence longer than max_len");
        let tok = p.var(g, self.token_embedding);
        let pos = p.var(g, self.position_embedding);
        let x = g.gather(tok, &batch.ids);
        let positions: Vec<usize> = (0..batch.ids.len()).map(|i| i % batch.seq).collect();
        let pe = g.gather(pos, &positions);
        let x = g.add(x, pe);
        let x = self.embedding_norm.forward(g, p, x);
        let mut x = maybe_dropout(g, x, &mut dropout);
        let valid = batch.key_valid();
        for block in &self.blocks {
            let q = block.query.forward(g, p, x);
            let k = block.key.forward(g, p, x);
            let v = block.value.forward(g, p, x);
            let a = g.attention(q, k, v, batch.batch, batch.seq, self.shape.heads, &valid);
            let a = block.attn_out.forward(g, p, a);
            let a = maybe_dropout(g, a, &mut dropout);
            let r = g.add(x, a);
            let h = block.attn_norm.forward(g, p, r);
            let f = block.ffn_in.forward(g, p, h);
            let f = g.gelu(f);
            let f = block.ffn_out.forward(g, p, f);
            let f = maybe_dropout(g, f, &mut dropout);
            let r = g.add(h, f);
            x = block.ffn_norm.forward(g, p, r);
        }
        x
    }

    /// Vocabulary logits for the selected hidden-state rows.
    pub fn mlm_logits<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, hidden: Var, rows: &[usize]) -> Var {
        let h = g.select_rows(hidden, rows);
        let h = self.mlm_transform.forward(g, p, h);
        let h = g.gelu(h);
        let h = self.mlm_norm.forward(g, p, h);
        let tok = p.var(g, self.token_embedding);
        let logits = g.matmul_t(h, tok);
        let bias = p.var(g, self.mlm_bias);
        g.add_row(logits, bias)
    }

    /// Summary-token hidden state per sequence, `batch x hidden`.
    pub fn summary<T: Scalar>(&self, g: &mut Graph<T>, hidden: Var, batch: &TokenBatch) -> Var {
        g.select_rows(hidden, &batch.cls_rows())
    }

    /// Inference-mode summary vectors (no dropout, no gradient use).
    pub fn embed<T: Scalar>(&self, store: &ParamStore<T>, seqs: &[Vec<usize>]) -> Vec<Vec<T>> {
        self.embed_rows(store, seqs, false)
    }

    /// Inference-mode hidden state at the last real position of each sequence.
    pub fn embed_last<T: Scalar>(&self, store: &ParamStore<T>, seqs: &[Vec<usize>]) -> Vec<Vec<T>> {
        self.embed_rows(store, seqs, true)
    }

    fn embed_rows<T: Scalar>(&self, store: &ParamStore<T>, seqs: &[Vec<usize>], last: bool) -> Vec<Vec<T>> {
        if seqs.is_empty() {
            return Vec::new();
        }
        let batch = TokenBatch::pad(seqs);
        let mut g = Graph::new();
        let h = self.forward(&mut g, Bound::new(0, store), &batch, None);
        let rows = if last { batch.last_rows() } else { batch.cls_rows() };
        let out = g.value(h);
        rows.iter().map(|&r| out.row(r).to_vec()).collect()
    }
}

/// The predictor that maps the student summary into the teacher's space:
/// two affine maps with a rectifier between them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictorHead {
    pub in_dim: usize,
    pub mid_dim: usize,
    pub out_dim: usize,
    first: Linear,
    second: Linear,
}

impl PredictorHead {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, in_dim: usize, mid_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let first = Linear::new(store, "predictor.first", in_dim, mid_dim, rng);
        let second = Linear::new(store, "predictor.second", mid_dim, out_dim, rng);
        Self { in_dim, mid_dim, out_dim, first, second }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: Bound<'_, T>, x: Var) -> Var {
        let h = self.first.forward(g, p, x);
        let h = g.relu(h);
        self.second.forward(g, p, h)
    }
}

pub fn describe(shape: &EncoderShape) -> String {
    format!(
        "vocab={} hidden={} layers={} heads={} ffn={} max_len={}",
        shape.vocab, shape.hidden, shape.layers, shape.heads, shape.ffn, shape.max_len
    )
}
