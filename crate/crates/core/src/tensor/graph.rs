use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use super::{gemm, Matrix, Scalar, View, ViewMut};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    /// `a * b^T`
    MatMulT(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// `x + b` with `b` a `1 x cols` row broadcast over every row of `x`.
    AddRow(usize, usize),
    Affine(usize, T, T),
    Gelu(usize),
    Relu(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Matrix<T>, rstd: Vec<T> },
    Gather { table: usize, ids: Vec<usize> },
    SelectRows { x: usize, rows: Vec<usize> },
    Attention { q: usize, k: usize, v: usize, layout: AttnLayout, probs: Vec<T> },
    NormalizeRows { x: usize, norms: Vec<T> },
    RowDot(usize, usize),
    Mean(usize),
    SoftmaxCe { logits: usize, targets: Vec<usize>, probs: Matrix<T> },
    BceLogits { logits: usize, targets: Matrix<T> },
    Dropout { x: usize, mask: Vec<T> },
}

#[derive(Clone)]
struct AttnLayout {
    batch: usize,
    seq: usize,
    heads: usize,
}

struct Node<T> {
    value: Matrix<T>,
    grad: Option<Matrix<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Append-only record of a forward computation.
///
/// Nodes are created in topological order, so [`Graph::backward`] is a
/// single reverse sweep. Parameters enter through [`Graph::param`] and are
/// deduplicated per `(slot, index)`; gradients for every use of a parameter
/// accumulate on its single leaf.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: BTreeMap<(usize, usize), usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: BTreeMap::new() }
    }

    fn push(&mut self, value: Matrix<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node { value, grad: None, requires_grad, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&Matrix<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, value: Matrix<T>) -> Var {
        self.nodes.push(Node { value, grad: None, requires_grad: false, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable leaf for parameter `index` of the store in `slot`.
    /// Repeated calls return the same node.
    pub fn param(&mut self, slot: usize, index: usize, value: &Matrix<T>) -> Var {
        if let Some(&id) = self.params.get(&(slot, index)) {
            return Var(id);
        }
        self.nodes.push(Node { value: value.clone(), grad: None, requires_grad: true, op: Op::Leaf });
        let id = self.nodes.len() - 1;
        self.params.insert((slot, index), id);
        Var(id)
    }

    /// Gradient accumulated on parameter `index` of `slot`, if it was used
    /// and reached by the backward sweep.
    pub fn param_grad(&self, slot: usize, index: usize) -> Option<&Matrix<T>> {
        self.params.get(&(slot, index)).and_then(|&id| self.nodes[id].grad.as_ref())
    }

    /// Copy of `x` cut off from the tape: no gradient flows through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(value, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    /// `a * b^T`
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let mut out = Matrix::zeros(av.rows(), bv.rows());
        gemm(T::one(), av.view(), bv.view().t(), T::zero(), out.view_mut());
        self.push(out, Op::MatMulT(a.0, b.0), &[a.0, b.0])
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Matrix<T> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.as_slice().iter().zip(bv.as_slice()).map(|(&x, &y)| f(x, y)).collect();
        Matrix::from_vec(av.rows(), av.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x + y);
        self.push(value, Op::Add(a.0, b.0), &[a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x - y);
        self.push(value, Op::Sub(a.0, b.0), &[a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.zip_with(a, b, |x, y| x * y);
        self.push(value, Op::Mul(a.0, b.0), &[a.0, b.0])
    }

    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        assert_eq!(bv.shape(), (1, xv.cols()), "bias must be 1 x cols");
        let mut out = xv.clone();
        let b = bv.as_slice();
        for r in 0..out.rows() {
            for (o, &bb) in out.row_mut(r).iter_mut().zip(b) {
                *o += bb;
            }
        }
        self.push(out, Op::AddRow(x.0, bias.0), &[x.0, bias.0])
    }

    /// `scale * x + shift`
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| scale * v + shift);
        self.push(value, Op::Affine(x.0, scale, shift), &[x.0])
    }

    pub fn scale(&mut self, x: Var, scale: T) -> Var {
        self.affine(x, scale, T::zero())
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(gelu);
        self.push(value, Op::Gelu(x.0), &[x.0])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        self.push(value, Op::Relu(x.0), &[x.0])
    }

    /// Row-wise layer normalization with learned `1 x cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Var {
        let xv = &self.nodes[x.0].value;
        let (rows, cols) = xv.shape();
        let g = self.nodes[gamma.0].value.as_slice();
        let b = self.nodes[beta.0].value.as_slice();
        assert_eq!(g.len(), cols);
        assert_eq!(b.len(), cols);
        let n = T::from_usize(cols).unwrap();
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            let xh = xhat.row_mut(r);
            for c in 0..cols {
                xh[c] = (row[c] - mean) * rs;
            }
            let o = out.row_mut(r);
            for c in 0..cols {
                o[c] = xhat.get(r, c) * g[c] + b[c];
            }
        }
        self.push(out, Op::LayerNorm { x: x.0, gamma: gamma.0, beta: beta.0, xhat, rstd }, &[x.0, gamma.0, beta.0])
    }

    /// Rows of `table` picked by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = &self.nodes[table.0].value;
        let mut out = Matrix::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(out, Op::Gather { table: table.0, ids: ids.to_vec() }, &[table.0])
    }

    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let xv = &self.nodes[x.0].value;
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (r, &src) in rows.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(src));
        }
        self.push(out, Op::SelectRows { x: x.0, rows: rows.to_vec() }, &[x.0])
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `q`, `k` and `v` are `(batch * seq) x hidden` with row `b * seq + t`
    /// holding position `t` of sequence `b`; head `h` owns columns
    /// `h * hidden / heads ..`. Keys with `key_valid == false` (padding) get
    /// zero attention weight.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, seq: usize, heads: usize, key_valid: &[bool]) -> Var {
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let hidden = qv.cols();
        assert_eq!(qv.rows(), batch * seq);
        assert_eq!(kv.shape(), qv.shape());
        assert_eq!(vv.shape(), qv.shape());
        assert_eq!(key_valid.len(), batch * seq);
        assert_eq!(hidden % heads, 0, "hidden not divisible by heads");
        let dh = hidden / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = Matrix::zeros(batch * seq, hidden);
        for b in 0..batch {
            for h in 0..heads {
                let base = b * seq * hidden + h * dh;
                let p_off = (b * heads + h) * seq * seq;
                let p = &mut probs[p_off..p_off + seq * seq];
                let qview = View { data: qv.as_slice(), offset: base, rows: seq, cols: dh, rs: hidden, cs: 1 };
                let kview = View { data: kv.as_slice(), offset: base, rows: seq, cols: dh, rs: hidden, cs: 1 };
                gemm(scale, qview, kview.t(), T::zero(), ViewMut { data: p, offset: 0, rows: seq, cols: seq, rs: seq, cs: 1 });
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let mut max = T::neg_infinity();
                    for j in 0..seq {
                        if key_valid[b * seq + j] {
                            max = max.max(row[j]);
                        }
                    }
                    let mut sum = T::zero();
                    for j in 0..seq {
                        if key_valid[b * seq + j] {
                            row[j] = (row[j] - max).exp();
                            sum += row[j];
                        } else {
                            row[j] = T::zero();
                        }
                    }
                    if sum > T::zero() {
                        for x in row.iter_mut() {
                            *x = *x / sum;
                        }
                    }
                }
                let pview = View { data: &*p, offset: 0, rows: seq, cols: seq, rs: seq, cs: 1 };
                let vview = View { data: vv.as_slice(), offset: base, rows: seq, cols: dh, rs: hidden, cs: 1 };
                let oview = ViewMut { data: out.as_mut_slice(), offset: base, rows: seq, cols: dh, rs: hidden, cs: 1 };
                gemm(T::one(), pview, vview, T::zero(), oview);
            }
        }
        let layout = AttnLayout { batch, seq, heads };
        self.push(out, Op::Attention { q: q.0, k: k.0, v: v.0, layout, probs }, &[q.0, k.0, v.0])
    }

    /// Scales every row to unit L2 norm.
    pub fn normalize_rows(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let eps = T::lit(1e-12);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.rows());
        for r in 0..xv.rows() {
            let n = xv.row(r).iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            norms.push(n);
            for o in out.row_mut(r) {
                *o = *o / n;
            }
        }
        self.push(out, Op::NormalizeRows { x: x.0, norms }, &[x.0])
    }

    /// Per-row inner product, `rows x 1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(av.shape(), bv.shape());
        let data = (0..av.rows()).map(|r| av.row(r).iter().zip(bv.row(r)).map(|(&x, &y)| x * y).sum()).collect();
        let value = Matrix::from_vec(av.rows(), 1, data);
        self.push(value, Op::RowDot(a.0, b.0), &[a.0, b.0])
    }

    /// Mean of all entries, `1 x 1`.
    pub fn mean(&mut self, x: Var) -> Var {
        let xv = &self.nodes[x.0].value;
        let n = T::from_usize(xv.len().max(1)).unwrap();
        let value = Matrix::scalar(xv.as_slice().iter().copied().sum::<T>() / n);
        self.push(value, Op::Mean(x.0), &[x.0])
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.rows(), targets.len(), "one target per row");
        let mut probs = Matrix::zeros(lv.rows(), lv.cols());
        let mut total = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < lv.cols(), "target out of range");
            let row = lv.row(r);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for (p, &v) in probs.row_mut(r).iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let n = T::from_usize(targets.len().max(1)).unwrap();
        let value = Matrix::scalar(total / n);
        self.push(value, Op::SoftmaxCe { logits: logits.0, targets: targets.to_vec(), probs }, &[logits.0])
    }

    /// Mean binary cross-entropy of sigmoid(logits) against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: Matrix<T>) -> Var {
        let lv = &self.nodes[logits.0].value;
        assert_eq!(lv.shape(), targets.shape());
        let mut total = T::zero();
        for (&z, &y) in lv.as_slice().iter().zip(targets.as_slice()) {
            total += z.max(T::zero()) - z * y + (T::one() + (-z.abs()).exp()).ln();
        }
        let n = T::from_usize(lv.len().max(1)).unwrap();
        let value = Matrix::scalar(total / n);
        self.push(value, Op::BceLogits { logits: logits.0, targets }, &[logits.0])
    }

    /// Elementwise product with a fixed mask (entries `0` or `1 / (1 - p)`).
    pub fn dropout(&mut self, x: Var, mask: Vec<T>) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), mask.len());
        let data = xv.as_slice().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Matrix::from_vec(xv.rows(), xv.cols(), data);
        self.push(value, Op::Dropout { x: x.0, mask }, &[x.0])
    }

    /// Reverse sweep from a scalar `root`.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(self.nodes[root.0].value.shape(), (1, 1), "backward from a non-scalar");
        for node in &mut self.nodes {
            node.grad = None;
        }
        if !self.nodes[root.0].requires_grad {
            return;
        }
        self.nodes[root.0].grad = Some(Matrix::scalar(T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            let contributions = self.input_grads(i, &g);
            if matches!(self.nodes[i].op, Op::Leaf) {
                self.nodes[i].grad = Some(g);
            }
            for (input, grad) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut self.nodes[input].grad {
                    Some(existing) => existing.add_assign(&grad),
                    slot @ None => *slot = Some(grad),
                }
            }
        }
    }

    fn input_grads(&self, i: usize, g: &Matrix<T>) -> Vec<(usize, Matrix<T>)> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        let needs = |j: usize| self.nodes[j].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                if needs(a) {
                    let mut da = Matrix::zeros(val(a).rows(), val(a).cols());
                    gemm(T::one(), g.view(), val(b).view().t(), T::zero(), da.view_mut());
                    out.push((a, da));
                }
                if needs(b) {
                    let mut db = Matrix::zeros(val(b).rows(), val(b).cols());
                    gemm(T::one(), val(a).view().t(), g.view(), T::zero(), db.view_mut());
                    out.push((b, db));
                }
            }
            &Op::MatMulT(a, b) => {
                if needs(a) {
                    let mut da = Matrix::zeros(val(a).rows(), val(a).cols());
                    gemm(T::one(), g.view(), val(b).view(), T::zero(), da.view_mut());
                    out.push((a, da));
                }
                if needs(b) {
                    let mut db = Matrix::zeros(val(b).rows(), val(b).cols());
                    gemm(T::one(), g.view().t(), val(a).view(), T::zero(), db.view_mut());
                    out.push((b, db));
                }
            }
            &Op::Add(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.clone()));
            }
            &Op::Sub(a, b) => {
                out.push((a, g.clone()));
                out.push((b, g.map(|v| -v)));
            }
            &Op::Mul(a, b) => {
                if needs(a) {
                    out.push((a, hadamard(g, val(b))));
                }
                if needs(b) {
                    out.push((b, hadamard(g, val(a))));
                }
            }
            &Op::AddRow(x, bias) => {
                if needs(bias) {
                    let mut db = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &v) in db.as_mut_slice().iter_mut().zip(g.row(r)) {
                            *d += v;
                        }
                    }
                    out.push((bias, db));
                }
                out.push((x, g.clone()));
            }
            &Op::Affine(x, scale, _) => out.push((x, g.map(|v| v * scale))),
            &Op::Gelu(x) => {
                let data = val(x).as_slice().iter().zip(g.as_slice()).map(|(&v, &d)| d * gelu_grad(v)).collect();
                out.push((x, Matrix::from_vec(g.rows(), g.cols(), data)));
            }
            &Op::Relu(x) => {
                let data = val(x)
                    .as_slice()
                    .iter()
                    .zip(g.as_slice())
                    .map(|(&v, &d)| if v > T::zero() { d } else { T::zero() })
                    .collect();
                out.push((x, Matrix::from_vec(g.rows(), g.cols(), data)));
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let (rows, cols) = xhat.shape();
                let gv = val(*gamma).as_slice();
                let n = T::from_usize(cols).unwrap();
                if needs(*gamma) || needs(*beta) {
                    let mut dg = Matrix::zeros(1, cols);
                    let mut db = Matrix::zeros(1, cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            let d = g.get(r, c);
                            dg.as_mut_slice()[c] += d * xhat.get(r, c);
                            db.as_mut_slice()[c] += d;
                        }
                    }
                    out.push((*gamma, dg));
                    out.push((*beta, db));
                }
                if needs(*x) {
                    let mut dx = Matrix::zeros(rows, cols);
                    for r in 0..rows {
                        let xh = xhat.row(r);
                        let gr = g.row(r);
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for c in 0..cols {
                            let d = gr[c] * gv[c];
                            sum_d += d;
                            sum_dx += d * xh[c];
                        }
                        let mean_d = sum_d / n;
                        let mean_dx = sum_dx / n;
                        let o = dx.row_mut(r);
                        for c in 0..cols {
                            o[c] = rstd[r] * (gr[c] * gv[c] - mean_d - xh[c] * mean_dx);
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::Gather { table, ids } => {
                let tv = val(*table);
                let mut dt = Matrix::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (d, &v) in dt.row_mut(id).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                out.push((*table, dt));
            }
            Op::SelectRows { x, rows } => {
                let xv = val(*x);
                let mut dx = Matrix::zeros(xv.rows(), xv.cols());
                for (r, &src) in rows.iter().enumerate() {
                    for (d, &v) in dx.row_mut(src).iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                out.push((*x, dx));
            }
            Op::Attention { q, k, v, layout, probs } => {
                let (dq, dk, dv) = attention_backward(val(*q), val(*k), val(*v), layout, probs, g);
                out.push((*q, dq));
                out.push((*k, dk));
                out.push((*v, dv));
            }
            Op::NormalizeRows { x, norms } => {
                let y = &node.value;
                let mut dx = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = g.row(r);
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                        *o = (gr[c] - yr[c] * dot) / norms[r];
                    }
                }
                out.push((*x, dx));
            }
            &Op::RowDot(a, b) => {
                let scaled = |m: &Matrix<T>| {
                    let mut d = m.clone();
                    for r in 0..d.rows() {
                        let s = g.get(r, 0);
                        for v in d.row_mut(r) {
                            *v = *v * s;
                        }
                    }
                    d
                };
                if needs(a) {
                    out.push((a, scaled(val(b))));
                }
                if needs(b) {
                    out.push((b, scaled(val(a))));
                }
            }
            &Op::Mean(x) => {
                let xv = val(x);
                let n = T::from_usize(xv.len().max(1)).unwrap();
                out.push((x, Matrix::filled(xv.rows(), xv.cols(), g.item() / n)));
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let n = T::from_usize(targets.len().max(1)).unwrap();
                let s = g.item() / n;
                let mut d = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    let row = d.row_mut(r);
                    row[t] -= T::one();
                    for v in row.iter_mut() {
                        *v = *v * s;
                    }
                }
                out.push((*logits, d));
            }
            Op::BceLogits { logits, targets } => {
                let lv = val(*logits);
                let n = T::from_usize(lv.len().max(1)).unwrap();
                let s = g.item() / n;
                let data = lv
                    .as_slice()
                    .iter()
                    .zip(targets.as_slice())
                    .map(|(&z, &y)| (sigmoid(z) - y) * s)
                    .collect();
                out.push((*logits, Matrix::from_vec(lv.rows(), lv.cols(), data)));
            }
            Op::Dropout { x, mask } => {
                let data = g.as_slice().iter().zip(mask).map(|(&d, &m)| d * m).collect();
                out.push((*x, Matrix::from_vec(g.rows(), g.cols(), data)));
            }
        }
        out
    }
}

fn hadamard<T: Scalar>(a: &Matrix<T>, b: &Matrix<T>) -> Matrix<T> {
    let data = a.as_slice().iter().zip(b.as_slice()).map(|(&x, &y)| x * y).collect();
    Matrix::from_vec(a.rows(), a.cols(), data)
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    half * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(GELU_C) * (x + T::lit(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = T::lit(GELU_C) * (T::one() + T::lit(3.0 * GELU_A) * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

fn attention_backward<T: Scalar>(
    q: &Matrix<T>,
    k: &Matrix<T>,
    v: &Matrix<T>,
    layout: &AttnLayout,
    probs: &[T],
    g: &Matrix<T>,
) -> (Matrix<T>, Matrix<T>, Matrix<T>) {
    let AttnLayout { batch, seq, heads, .. } = *layout;
    let hidden = q.cols();
    let dh = hidden / heads;
    let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
    let mut dq = Matrix::zeros(q.rows(), hidden);
    let mut dk = Matrix::zeros(q.rows(), hidden);
    let mut dv = Matrix::zeros(q.rows(), hidden);
    let mut dp = vec![T::zero(); seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let base = b * seq * hidden + h * dh;
            let p_off = (b * heads + h) * seq * seq;
            let p = &probs[p_off..p_off + seq * seq];
            let pview = View { data: p, offset: 0, rows: seq, cols: seq, rs: seq, cs: 1 };
            fn strided<T: Scalar>(m: &Matrix<T>, base: usize, seq: usize, dh: usize, hidden: usize) -> View<'_, T> {
                View { data: m.as_slice(), offset: base, rows: seq, cols: dh, rs: hidden, cs: 1 }
            }
            let strided = |m| strided(m, base, seq, dh, hidden);
            let gview = strided(g);
            // dV = P^T dO
            gemm(T::one(), pview.t(), gview, T::zero(), ViewMut { data: dv.as_mut_slice(), offset: base, rows: seq, cols: dh, rs: hidden, cs: 1 });
            // dP = dO V^T
            gemm(T::one(), gview, strided(v).t(), T::zero(), ViewMut { data: &mut dp, offset: 0, rows: seq, cols: seq, rs: seq, cs: 1 });
            // dS = P * (dP - rowsum(dP * P))
            for i in 0..seq {
                let pr = &p[i * seq..(i + 1) * seq];
                let dr = &mut dp[i * seq..(i + 1) * seq];
                let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                for j in 0..seq {
                    dr[j] = pr[j] * (dr[j] - dot);
                }
            }
            let dsview = View { data: &dp, offset: 0, rows: seq, cols: seq, rs: seq, cs: 1 };
            gemm(scale, dsview, strided(k), T::zero(), ViewMut { data: dq.as_mut_slice(), offset: base, rows: seq, cols: dh, rs: hidden, cs: 1 });
            gemm(scale, dsview.t(), strided(q), T::zero(), ViewMut { data: dk.as_mut_slice(), offset: base, rows: seq, cols: dh, rs: hidden, cs: 1 });
        }
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use rand::Rng as _;

    fn random(rows: usize, cols: usize, r: &mut crate::rng::Rng) -> Matrix<f64> {
        Matrix::from_fn(rows, cols, |_, _| r.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(loss)/d(input) for every entry of every input.
    fn check(inputs: &[Matrix<f64>], build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |ms: &[Matrix<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ms.iter().enumerate().map(|(i, m)| g.param(0, i, m)).collect();
            let out = build(&mut g, &vars);
            (g, vars, out)
        };
        let (mut g, vars, out) = eval(inputs);
        g.backward(out);
        let eps = 1e-5;
        for (i, m) in inputs.iter().enumerate() {
            let analytic = g.grad(vars[i]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            for j in 0..m.len() {
                let mut plus = inputs.to_vec();
                plus[i].as_mut_slice()[j] += eps;
                let mut minus = inputs.to_vec();
                minus[i].as_mut_slice()[j] -= eps;
                let (gp, _, op) = eval(&plus);
                let (gm, _, om) = eval(&minus);
                let numeric = (gp.value(op).item() - gm.value(om).item()) / (2.0 * eps);
                let a = analytic.as_slice()[j];
                assert!((a - numeric).abs() <= 1e-6 + 1e-5 * numeric.abs(), "input {i} entry {j}: analytic {a} numeric {numeric}");
            }
        }
    }

    #[test]
    fn grad_matmul_variants() {
        let mut r = rng::seeded(1);
        let (a, b, c) = (random(3, 4, &mut r), random(4, 2, &mut r), random(5, 4, &mut r));
        check(&[a.clone(), b], |g, v| {
            let m = g.matmul(v[0], v[1]);
            let s = g.mul(m, m);
            g.mean(s)
        });
        check(&[a, c], |g, v| {
            let m = g.matmul_t(v[0], v[1]);
            let t = g.gelu(m);
            g.mean(t)
        });
    }

    #[test]
    fn grad_elementwise() {
        let mut r = rng::seeded(2);
        let (a, b, bias) = (random(3, 4, &mut r), random(3, 4, &mut r), random(1, 4, &mut r));
        check(&[a, b, bias], |g, v| {
            let s = g.sub(v[0], v[1]);
            let p = g.mul(s, v[0]);
            let q = g.add_row(p, v[2]);
            let r = g.relu(q);
            let t = g.add(r, v[1]);
            let u = g.affine(t, 0.7, 0.2);
            let w = g.mul(u, u);
            g.mean(w)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let mut r = rng::seeded(3);
        let (x, gamma, beta, w) = (random(4, 6, &mut r), random(1, 6, &mut r), random(1, 6, &mut r), random(4, 6, &mut r));
        check(&[x, gamma, beta, w], |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-6);
            let z = g.mul(y, v[3]);
            g.mean(z)
        });
    }

    #[test]
    fn grad_attention_with_padding() {
        let mut r = rng::seeded(4);
        let (batch, seq, hidden, heads) = (2, 3, 4, 2);
        let q = random(batch * seq, hidden, &mut r);
        let k = random(batch * seq, hidden, &mut r);
        let v = random(batch * seq, hidden, &mut r);
        let w = random(batch * seq, hidden, &mut r);
        let valid = [true, true, true, true, true, false];
        check(&[q, k, v, w], |g, x| {
            let a = g.attention(x[0], x[1], x[2], batch, seq, heads, &valid);
            let m = g.mul(a, x[3]);
            g.mean(m)
        });
    }

    #[test]
    fn attention_ignores_padded_keys() {
        let mut r = rng::seeded(9);
        let q = random(2, 4, &mut r);
        let k = random(2, 4, &mut r);
        let mut v = random(2, 4, &mut r);
        let mut g = Graph::new();
        let (qv, kv, vv) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
        let a = g.attention(qv, kv, vv, 1, 2, 2, &[true, false]);
        let first = g.value(a).clone();
        // changing the padded value row must not change the output
        v.row_mut(1).iter_mut().for_each(|x| *x += 10.0);
        let mut g2 = Graph::new();
        let (qv, kv, vv) = (g2.constant(q), g2.constant(k), g2.constant(v.clone()));
        let a2 = g2.attention(qv, kv, vv, 1, 2, 2, &[true, false]);
        assert_eq!(&first, g2.value(a2));
        assert_eq!(first.row(0), v.row(0));
    }

    #[test]
    fn grad_gather_select_normalize() {
        let mut r = rng::seeded(5);
        let table = random(5, 3, &mut r);
        let other = random(3, 3, &mut r);
        check(&[table, other], |g, v| {
            let e = g.gather(v[0], &[1, 3, 1]);
            let s = g.select_rows(e, &[2, 0, 1]);
            let n = g.normalize_rows(s);
            let m = g.normalize_rows(v[1]);
            let d = g.row_dot(n, m);
            let l = g.affine(d, -1.0, 1.0);
            g.mean(l)
        });
    }

    #[test]
    fn grad_losses() {
        let mut r = rng::seeded(6);
        let logits = random(4, 5, &mut r);
        check(&[logits.clone()], |g, v| g.softmax_cross_entropy(v[0], &[0, 4, 2, 2]));
        let targets = Matrix::from_fn(4, 5, |i, j| if (i + j) % 2 == 0 { 1.0 } else { 0.0 });
        check(&[logits], move |g, v| g.bce_with_logits(v[0], targets.clone()));
    }

    #[test]
    fn grad_dropout_and_reuse() {
        let mut r = rng::seeded(7);
        let x = random(2, 3, &mut r);
        check(&[x], |g, v| {
            let d = g.dropout(v[0], alloc::vec![0.0, 2.0, 2.0, 2.0, 0.0, 2.0]);
            let m = g.mul(d, v[0]);
            g.mean(m)
        });
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(0, 0, &Matrix::from_vec(1, 2, alloc::vec![1.0f64, 2.0]));
        let y = g.param(1, 0, &Matrix::from_vec(1, 2, alloc::vec![3.0, 4.0]));
        let yd = g.detach(y);
        let p = g.mul(x, yd);
        let l = g.mean(p);
        g.backward(l);
        assert!(g.param_grad(0, 0).is_some());
        assert!(g.param_grad(1, 0).is_none());
    }

    #[test]
    fn cross_entropy_value() {
        let mut g = Graph::new();
        let l = g.constant(Matrix::from_vec(1, 2, alloc::vec![0.0f64, 0.0]));
        let ce = g.softmax_cross_entropy(l, &[1]);
        assert!((g.value(ce).item() - core::f64::consts::LN_2).abs() < 1e-12);
    }
}
