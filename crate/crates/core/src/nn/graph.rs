//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every primitive applied during one forward pass.
//! Parameters are read from a borrowed [`ParamStore`]; each parameter enters
//! the tape at most once, so layers that share a parameter also share its
//! node and their gradients accumulate into one slot.

use std::rc::Rc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::tensor::gemm;
use super::{ParamId, ParamStore, SeqMask, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Relative-position tables for one attention: `[2·clip + 1 × d_head]`.
#[derive(Clone, Copy, Debug)]
pub struct RelPos {
    pub keys: NodeId,
    pub values: NodeId,
    pub clip: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    MatMul(NodeId, NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Softmax(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(NodeId, NodeId),
    ExpandRows {
        x: NodeId,
        len: usize,
    },
    MeanPool {
        x: NodeId,
        mask: Rc<SeqMask>,
    },
    MaskRows {
        x: NodeId,
        mask: Rc<SeqMask>,
    },
    Embedding {
        table: NodeId,
        ids: Vec<usize>,
    },
    AttnWeights {
        q: NodeId,
        k: NodeId,
        mask: Rc<SeqMask>,
        scale: f64,
    },
    Mix {
        w: NodeId,
        v: NodeId,
        len: usize,
    },
    MultiHead {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        rel: Option<RelPos>,
        heads: usize,
        mask: Rc<SeqMask>,
        probs: Vec<f64>,
        keep: Option<Vec<f64>>,
    },
    Dropout {
        x: NodeId,
        keep: Vec<f64>,
    },
    CrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    Bce {
        logits: NodeId,
        targets: Vec<f64>,
        weights: Vec<f64>,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Add(..) => "add",
            Op::Scale(..) => "scale",
            Op::Sum(_) => "sum",
            Op::MatMul(..) => "matmul",
            Op::Linear { .. } => "linear",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::ConcatCols(..) => "concat_cols",
            Op::ExpandRows { .. } => "expand_rows",
            Op::MeanPool { .. } => "mean_pool",
            Op::MaskRows { .. } => "mask_rows",
            Op::Embedding { .. } => "embedding",
            Op::AttnWeights { .. } => "attn_weights",
            Op::Mix { .. } => "mix",
            Op::MultiHead { .. } => "multi_head_attention",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::Bce { .. } => "bce",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

struct DropoutState {
    rate: f64,
    rng: ChaCha8Rng,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
    dropout: Option<DropoutState>,
}

impl<'s> Graph<'s> {
    /// Graph without dropout.
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
            dropout: None,
        }
    }

    /// Graph with dropout active at `rate`, drawing masks from `seed`.
    pub fn training(store: &'s ParamStore, rate: f64, seed: u64) -> Self {
        let mut g = Graph::new(store);
        if rate > 0.0 {
            g.dropout = Some(DropoutState {
                rate,
                rng: ChaCha8Rng::seed_from_u64(seed),
            });
        }
        g
    }

    pub fn is_training(&self) -> bool {
        self.dropout.is_some()
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[NodeId]) -> Result<NodeId> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {}", op.name())));
        }
        let needs_grad = inputs.iter().any(|i| self.nodes[i.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Constant input; receives no gradient.
    pub fn input(&mut self, value: Tensor) -> Result<NodeId> {
        self.push(value, Op::Leaf, &[])
    }

    /// Node holding the current value of a parameter. Repeated calls with the
    /// same id return the same node.
    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(node) = self.param_nodes[id.0] {
            return node;
        }
        self.nodes.push(Node {
            value: self.store.get(id).clone(),
            op: Op::Param(id),
            needs_grad: true,
        });
        let node = NodeId(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(node);
        node
    }

    fn check_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(format!("{what}: {sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.check_same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Plain matrix product `a [r × k] · b [k × c]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (r, k, c) = (av.rows(), av.cols(), bv.cols());
        if bv.shape().len() != 2 || bv.rows() != k {
            return Err(Error::shape(format!(
                "matmul: {:?} · {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let mut out = vec![0.0; r * c];
        gemm(
            r,
            k,
            c,
            av.data(),
            (k as isize, 1),
            bv.data(),
            (c as isize, 1),
            0.0,
            &mut out,
        );
        let out = Tensor::new(vec![r, c], out)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// Affine map `x Wᵀ + b` over the last axis, with `W: [d_out × d_in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (r, din) = (xv.rows(), xv.cols());
        if wv.shape().len() != 2 || wv.cols() != din {
            return Err(Error::shape(format!(
                "linear: input {:?} against weight {:?}",
                xv.shape(),
                wv.shape()
            )));
        }
        let dout = wv.rows();
        let mut out = vec![0.0; r * dout];
        if let Some(b) = b {
            let bv = self.value(b);
            if bv.len() != dout {
                return Err(Error::shape(format!(
                    "linear: bias of {} for output {dout}",
                    bv.len()
                )));
            }
            for row in out.chunks_mut(dout) {
                row.copy_from_slice(bv.data());
            }
        }
        gemm(
            r,
            din,
            dout,
            xv.data(),
            (din as isize, 1),
            wv.data(),
            (1, din as isize),
            1.0,
            &mut out,
        );
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("non-empty shape") = dout;
        let out = Tensor::new(shape, out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        self.push(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        self.push(out, Op::Sigmoid(x), &[x])
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            softmax_in_place(row);
        }
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Normalises each row to zero mean and unit variance, then applies
    /// `gain` and `bias`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        if d < 2 || self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(format!(
                "layer_norm over {d} features with gain {} and bias {}",
                self.value(gain).len(),
                self.value(bias).len()
            )));
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = xv.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = g[c] * h + b[c];
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        )
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rows() != bv.rows() {
            return Err(Error::shape(format!(
                "concat_cols: {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(av.rows() * (ca + cb));
        for r in 0..av.rows() {
            out.extend_from_slice(av.row(r));
            out.extend_from_slice(bv.row(r));
        }
        let out = Tensor::new(vec![av.rows(), ca + cb], out)?;
        self.push(out, Op::ConcatCols(a, b), &[a, b])
    }

    /// Repeats row `b` of `x` for all `len` positions of utterance `b`.
    pub fn expand_rows(&mut self, x: NodeId, len: usize) -> Result<NodeId> {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Vec::with_capacity(xv.rows() * len * d);
        for r in 0..xv.rows() {
            for _ in 0..len {
                out.extend_from_slice(xv.row(r));
            }
        }
        let out = Tensor::new(vec![xv.rows() * len, d], out)?;
        self.push(out, Op::ExpandRows { x, len }, &[x])
    }

    /// Mean over the valid rows of each utterance: `[B·n × d] → [B × d]`.
    pub fn mean_pool(&mut self, x: NodeId, mask: &Rc<SeqMask>) -> Result<NodeId> {
        let xv = self.value(x);
        self.check_rows(xv, mask, "mean_pool")?;
        let d = xv.cols();
        let mut out = vec![0.0; mask.batch() * d];
        for b in 0..mask.batch() {
            let count = mask.count(b);
            if count == 0 {
                return Err(Error::AllMasked(b));
            }
            let acc = &mut out[b * d..(b + 1) * d];
            for j in 0..mask.len() {
                if mask.is_valid(b, j) {
                    for (a, v) in acc.iter_mut().zip(xv.row(b * mask.len() + j)) {
                        *a += v;
                    }
                }
            }
            let inv = 1.0 / count as f64;
            acc.iter_mut().for_each(|a| *a *= inv);
        }
        let out = Tensor::new(vec![mask.batch(), d], out)?;
        self.push(
            out,
            Op::MeanPool {
                x,
                mask: Rc::clone(mask),
            },
            &[x],
        )
    }

    /// Zeroes every padded row.
    pub fn mask_rows(&mut self, x: NodeId, mask: &Rc<SeqMask>) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        self.check_rows(&out, mask, "mask_rows")?;
        for r in 0..mask.rows() {
            if !mask.row_valid(r) {
                out.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
            }
        }
        self.push(
            out,
            Op::MaskRows {
                x,
                mask: Rc::clone(mask),
            },
            &[x],
        )
    }

    /// Row lookup into `table: [V × d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tv = self.value(table);
        let d = tv.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= tv.rows() {
                return Err(Error::Encode(format!(
                    "id {id} out of range for table of {} rows",
                    tv.rows()
                )));
            }
            out.extend_from_slice(tv.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Single-head attention weights `softmax(scale · q_j · k_k)` over the
    /// valid keys of each utterance, as a `[B·n × n]` matrix. Padded key
    /// columns are exactly zero, and so are rows of padded queries.
    pub fn attn_weights(
        &mut self,
        q: NodeId,
        k: NodeId,
        mask: &Rc<SeqMask>,
        scale: f64,
    ) -> Result<NodeId> {
        self.check_same_shape(q, k, "attn_weights")?;
        let (qv, kv) = (self.value(q), self.value(k));
        self.check_rows(qv, mask, "attn_weights")?;
        let n = mask.len();
        let mut out = vec![0.0; mask.rows() * n];
        for b in 0..mask.batch() {
            if mask.count(b) == 0 {
                return Err(Error::AllMasked(b));
            }
            for i in 0..n {
                if !mask.is_valid(b, i) {
                    continue;
                }
                let row = &mut out[(b * n + i) * n..(b * n + i + 1) * n];
                let qi = qv.row(b * n + i);
                for (j, s) in row.iter_mut().enumerate() {
                    if mask.is_valid(b, j) {
                        *s = scale * dot(qi, kv.row(b * n + j));
                    }
                }
                masked_softmax(row, |j| mask.is_valid(b, j));
            }
        }
        let out = Tensor::new(vec![mask.rows(), n], out)?;
        self.push(
            out,
            Op::AttnWeights {
                q,
                k,
                mask: Rc::clone(mask),
                scale,
            },
            &[q, k],
        )
    }

    /// `out_{b,j} = Σ_k w[b·n + j, k] · v_{b,k}` for weights from
    /// [`Graph::attn_weights`].
    pub fn mix(&mut self, w: NodeId, v: NodeId) -> Result<NodeId> {
        let (wv, vv) = (self.value(w), self.value(v));
        let n = wv.cols();
        if wv.rows() != vv.rows() || n == 0 || wv.rows() % n != 0 {
            return Err(Error::shape(format!(
                "mix: weights {:?} against values {:?}",
                wv.shape(),
                vv.shape()
            )));
        }
        let d = vv.cols();
        let batch = wv.rows() / n;
        let mut out = vec![0.0; wv.rows() * d];
        for b in 0..batch {
            let base = b * n;
            gemm(
                n,
                n,
                d,
                &wv.data()[base * n..],
                (n as isize, 1),
                &vv.data()[base * d..],
                (d as isize, 1),
                0.0,
                &mut out[base * d..(base + n) * d],
            );
        }
        let out = Tensor::new(vec![wv.rows(), d], out)?;
        self.push(out, Op::Mix { w, v, len: n }, &[w, v])
    }

    /// Multi-head scaled dot-product attention over already projected
    /// `q`, `k`, `v` (`[B·n × d]`, split column-wise into `heads` heads).
    ///
    /// Padded keys are excluded before the softmax and padded queries
    /// produce zero rows. With `rel`, learned relative-position embeddings
    /// are added to keys and values, indexed by the clipped offset `k − j`.
    /// Dropout, when the graph is training, applies to attention weights.
    pub fn multi_head(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        rel: Option<RelPos>,
        mask: &Rc<SeqMask>,
    ) -> Result<NodeId> {
        self.check_same_shape(q, k, "multi_head q/k")?;
        self.check_same_shape(q, v, "multi_head q/v")?;
        let d = self.value(q).cols();
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape(format!("{d} features over {heads} heads")));
        }
        self.check_rows(self.value(q), mask, "multi_head")?;
        let dh = d / heads;
        if let Some(rel) = rel {
            let width = 2 * rel.clip + 1;
            for t in [rel.keys, rel.values] {
                if self.value(t).shape() != [width, dh] {
                    return Err(Error::shape(format!(
                        "relative table {:?}, expected [{width}, {dh}]",
                        self.value(t).shape()
                    )));
                }
            }
        }
        let n = mask.len();
        let nb = mask.batch();
        let keep = self.draw_keep(nb * heads * n * n);
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let rel_vals = rel.map(|r| (self.value(r.keys), self.value(r.values), r.clip));
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; nb * heads * n * n];
        let mut out = vec![0.0; mask.rows() * d];
        let mut scores = vec![0.0; n];
        for b in 0..nb {
            if mask.count(b) == 0 {
                return Err(Error::AllMasked(b));
            }
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..n {
                    if !mask.is_valid(b, i) {
                        continue;
                    }
                    let qi = &qv.row(b * n + i)[cols.clone()];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = 0.0;
                        if !mask.is_valid(b, j) {
                            continue;
                        }
                        let mut acc = dot(qi, &kv.row(b * n + j)[cols.clone()]);
                        if let Some((rk, _, clip)) = rel_vals {
                            acc += dot(qi, rk.row(rel_index(i, j, clip)));
                        }
                        *s = acc * scale;
                    }
                    masked_softmax(&mut scores, |j| mask.is_valid(b, j));
                    let pbase = ((b * heads + h) * n + i) * n;
                    probs[pbase..pbase + n].copy_from_slice(&scores);
                    let orow = &mut out[(b * n + i) * d + h * dh..(b * n + i) * d + (h + 1) * dh];
                    for j in 0..n {
                        if !mask.is_valid(b, j) {
                            continue;
                        }
                        let mut p = scores[j];
                        if let Some(keep) = &keep {
                            p *= keep[pbase + j];
                        }
                        if p == 0.0 {
                            continue;
                        }
                        axpy(p, &vv.row(b * n + j)[cols.clone()], orow);
                        if let Some((_, rv, clip)) = rel_vals {
                            axpy(p, rv.row(rel_index(i, j, clip)), orow);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(vec![mask.rows(), d], out)?;
        let mut inputs = vec![q, k, v];
        if let Some(r) = rel {
            inputs.extend([r.keys, r.values]);
        }
        self.push(
            out,
            Op::MultiHead {
                q,
                k,
                v,
                rel,
                heads,
                mask: Rc::clone(mask),
                probs,
                keep,
            },
            &inputs,
        )
    }

    /// Inverted dropout; identity when the graph is not training.
    pub fn dropout(&mut self, x: NodeId) -> Result<NodeId> {
        let Some(keep) = self.draw_keep(self.value(x).len()) else {
            return Ok(x);
        };
        let mut out = self.value(x).clone();
        for (v, k) in out.data_mut().iter_mut().zip(&keep) {
            *v *= k;
        }
        self.push(out, Op::Dropout { x, keep }, &[x])
    }

    fn draw_keep(&mut self, len: usize) -> Option<Vec<f64>> {
        let state = self.dropout.as_mut()?;
        let scale = 1.0 / (1.0 - state.rate);
        Some(
            (0..len)
                .map(|_| {
                    if state.rng.gen::<f64>() < state.rate {
                        0.0
                    } else {
                        scale
                    }
                })
                .collect(),
        )
    }

    /// `Σ_r weights[r] · (−log softmax(logits_r)[targets[r]])`. Rows with zero
    /// weight are skipped entirely.
    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        targets: &[usize],
        weights: &[f64],
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        let (rows, c) = (lv.rows(), lv.cols());
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::shape(format!(
                "cross_entropy: {rows} rows, {} targets, {} weights",
                targets.len(),
                weights.len()
            )));
        }
        let mut probs = vec![0.0; rows * c];
        let mut total = 0.0;
        for r in 0..rows {
            if weights[r] == 0.0 {
                continue;
            }
            if targets[r] >= c {
                return Err(Error::Label(format!("target {} out of {c} classes", targets[r])));
            }
            let row = lv.row(r);
            total += weights[r] * -log_softmax_at(row, targets[r]);
            let p = &mut probs[r * c..(r + 1) * c];
            p.copy_from_slice(row);
            softmax_in_place(p);
        }
        self.push(
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Binary cross-entropy on logits against `targets` of the same shape,
    /// summed over classes and weighted per row.
    pub fn bce_with_logits(
        &mut self,
        logits: NodeId,
        targets: &Tensor,
        weights: &[f64],
    ) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() || weights.len() != lv.rows() {
            return Err(Error::shape(format!(
                "bce: logits {:?}, targets {:?}, {} weights",
                lv.shape(),
                targets.shape(),
                weights.len()
            )));
        }
        let mut total = 0.0;
        for r in 0..lv.rows() {
            if weights[r] == 0.0 {
                continue;
            }
            let row_loss: f64 = lv
                .row(r)
                .iter()
                .zip(targets.row(r))
                .map(|(&x, &y)| bce_logit(x, y))
                .sum();
            total += weights[r] * row_loss;
        }
        self.push(
            Tensor::scalar(total),
            Op::Bce {
                logits,
                targets: targets.data().to_vec(),
                weights: weights.to_vec(),
            },
            &[logits],
        )
    }

    fn check_rows(&self, t: &Tensor, mask: &SeqMask, what: &str) -> Result<()> {
        if t.rows() != mask.rows() {
            return Err(Error::shape(format!(
                "{what}: {} rows against a mask of {}",
                t.rows(),
                mask.rows()
            )));
        }
        Ok(())
    }

    /// Attention weights cached by a [`Graph::multi_head`] node, laid out as
    /// `[B × heads × n × n]` (before dropout).
    pub fn attention_probs(&self, id: NodeId) -> Option<&[f64]> {
        match &self.nodes[id.0].op {
            Op::MultiHead { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse pass from the scalar `loss`; returns one gradient slot per
    /// parameter of the store (`None` when the parameter was not used).
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), 1.0));
        let mut out = Gradients {
            grads: vec![None; self.store.len()],
        };
        for idx in (0..=loss.0).rev() {
            let Some(gy) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            self.backprop(&node.op, &node.value, gy, &mut grads, &mut out)?;
        }
        for g in out.grads.iter().flatten() {
            if !g.is_finite() {
                return Err(Error::NonFinite("gradient".into()));
            }
        }
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
        if !self.nodes[id.0].needs_grad {
            return;
        }
        match &mut grads[id.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, id: NodeId) -> bool {
        self.nodes[id.0].needs_grad
    }

    fn backprop(
        &self,
        op: &Op,
        y: &Tensor,
        gy: Tensor,
        grads: &mut [Option<Tensor>],
        out: &mut Gradients,
    ) -> Result<()> {
        match op {
            Op::Leaf => {}
            Op::Param(id) => out.grads[id.0] = Some(gy),
            Op::Add(a, b) => {
                if a == b {
                    let mut g = gy.clone();
                    g.add_assign(&gy);
                    self.accumulate(grads, *a, g);
                } else {
                    self.accumulate(grads, *b, gy.clone());
                    self.accumulate(grads, *a, gy);
                }
            }
            Op::Scale(x, c) => {
                let mut g = gy;
                g.data_mut().iter_mut().for_each(|v| *v *= c);
                self.accumulate(grads, *x, g);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(grads, *x, Tensor::filled(&shape, gy.item()));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (r, k, c) = (av.rows(), av.cols(), bv.cols());
                if self.wants(*a) {
                    let mut da = vec![0.0; r * k];
                    gemm(
                        r,
                        c,
                        k,
                        gy.data(),
                        (c as isize, 1),
                        bv.data(),
                        (1, c as isize),
                        0.0,
                        &mut da,
                    );
                    self.accumulate(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.wants(*b) {
                    let mut db = vec![0.0; k * c];
                    gemm(
                        k,
                        r,
                        c,
                        av.data(),
                        (1, k as isize),
                        gy.data(),
                        (c as isize, 1),
                        0.0,
                        &mut db,
                    );
                    self.accumulate(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (r, din, dout) = (xv.rows(), xv.cols(), wv.rows());
                if self.wants(*x) {
                    let mut dx = vec![0.0; r * din];
                    gemm(
                        r,
                        dout,
                        din,
                        gy.data(),
                        (dout as isize, 1),
                        wv.data(),
                        (din as isize, 1),
                        0.0,
                        &mut dx,
                    );
                    self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
                }
                if self.wants(*w) {
                    let mut dw = vec![0.0; dout * din];
                    gemm(
                        dout,
                        r,
                        din,
                        gy.data(),
                        (1, dout as isize),
                        xv.data(),
                        (din as isize, 1),
                        0.0,
                        &mut dw,
                    );
                    self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                }
                if let Some(b) = b {
                    let mut db = vec![0.0; dout];
                    for row in gy.data().chunks(dout) {
                        for (a, g) in db.iter_mut().zip(row) {
                            *a += g;
                        }
                    }
                    let shape = self.value(*b).shape().to_vec();
                    self.accumulate(grads, *b, Tensor::new(shape, db)?);
                }
            }
            Op::Relu(x) => {
                let mut g = gy;
                for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                    if *yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Sigmoid(x) => {
                let mut g = gy;
                for (gv, s) in g.data_mut().iter_mut().zip(y.data()) {
                    *gv *= s * (1.0 - s);
                }
                self.accumulate(grads, *x, g);
            }
            Op::Softmax(x) => {
                let mut g = gy;
                let c = y.cols();
                for (gr, pr) in g.data_mut().chunks_mut(c).zip(y.data().chunks(c)) {
                    softmax_backward(pr, gr);
                }
                self.accumulate(grads, *x, g);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = y.cols();
                let g = self.value(*gain).data();
                let mut dx = vec![0.0; y.len()];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for r in 0..y.rows() {
                    let gyr = gy.row(r);
                    let hr = &xhat[r * d..(r + 1) * d];
                    for c in 0..d {
                        dgain[c] += gyr[c] * hr[c];
                        dbias[c] += gyr[c];
                        dxhat[c] = gyr[c] * g[c];
                    }
                    let mean_dh = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh_h = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for c in 0..d {
                        dx[r * d + c] = inv_std[r] * (dxhat[c] - mean_dh - hr[c] * mean_dh_h);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(y.shape().to_vec(), dx)?);
                let gshape = self.value(*gain).shape().to_vec();
                self.accumulate(grads, *gain, Tensor::new(gshape, dgain)?);
                let bshape = self.value(*bias).shape().to_vec();
                self.accumulate(grads, *bias, Tensor::new(bshape, dbias)?);
            }
            Op::ConcatCols(a, b) => {
                let ca = self.value(*a).cols();
                let cb = self.value(*b).cols();
                let rows = y.rows();
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = gy.row(r);
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                let sa = self.value(*a).shape().to_vec();
                let sb = self.value(*b).shape().to_vec();
                self.accumulate(grads, *a, Tensor::new(sa, da)?);
                self.accumulate(grads, *b, Tensor::new(sb, db)?);
            }
            Op::ExpandRows { x, len } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for r in 0..gy.rows() {
                    let dst = &mut dx[(r / len) * d..(r / len + 1) * d];
                    for (a, g) in dst.iter_mut().zip(gy.row(r)) {
                        *a += g;
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::MeanPool { x, mask } => {
                let xv = self.value(*x);
                let d = xv.cols();
                let mut dx = vec![0.0; xv.len()];
                for b in 0..mask.batch() {
                    let inv = 1.0 / mask.count(b) as f64;
                    for j in 0..mask.len() {
                        if mask.is_valid(b, j) {
                            let r = b * mask.len() + j;
                            for (a, g) in dx[r * d..(r + 1) * d].iter_mut().zip(gy.row(b)) {
                                *a = g * inv;
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xv.shape().to_vec(), dx)?);
            }
            Op::MaskRows { x, mask } => {
                let mut g = gy;
                for r in 0..mask.rows() {
                    if !mask.row_valid(r) {
                        g.row_mut(r).iter_mut().for_each(|v| *v = 0.0);
                    }
                }
                self.accumulate(grads, *x, g);
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for (a, g) in dt[id * d..(id + 1) * d].iter_mut().zip(gy.row(r)) {
                        *a += g;
                    }
                }
                self.accumulate(grads, *table, Tensor::new(tv.shape().to_vec(), dt)?);
            }
            Op::AttnWeights { q, k, mask, scale } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let n = mask.len();
                let d = qv.cols();
                let mut dq = vec![0.0; qv.len()];
                let mut dk = vec![0.0; kv.len()];
                let mut ds = vec![0.0; n];
                for b in 0..mask.batch() {
                    for i in 0..n {
                        if !mask.is_valid(b, i) {
                            continue;
                        }
                        let r = b * n + i;
                        let p = y.row(r);
                        ds.copy_from_slice(gy.row(r));
                        softmax_backward(p, &mut ds);
                        for j in 0..n {
                            if !mask.is_valid(b, j) || ds[j] == 0.0 {
                                continue;
                            }
                            let c = scale * ds[j];
                            let kr = b * n + j;
                            axpy(c, kv.row(kr), &mut dq[r * d..(r + 1) * d]);
                            axpy(c, qv.row(r), &mut dk[kr * d..(kr + 1) * d]);
                        }
                    }
                }
                self.accumulate(grads, *q, Tensor::new(qv.shape().to_vec(), dq)?);
                self.accumulate(grads, *k, Tensor::new(kv.shape().to_vec(), dk)?);
            }
            Op::Mix { w, v, len } => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let n = *len;
                let d = vv.cols();
                let batch = wv.rows() / n;
                let mut dw = vec![0.0; wv.len()];
                let mut dv = vec![0.0; vv.len()];
                for b in 0..batch {
                    let base = b * n;
                    // dW_b = dY_b · V_bᵀ
                    gemm(
                        n,
                        d,
                        n,
                        &gy.data()[base * d..],
                        (d as isize, 1),
                        &vv.data()[base * d..],
                        (1, d as isize),
                        0.0,
                        &mut dw[base * n..(base + n) * n],
                    );
                    // dV_b = W_bᵀ · dY_b
                    gemm(
                        n,
                        n,
                        d,
                        &wv.data()[base * n..],
                        (1, n as isize),
                        &gy.data()[base * d..],
                        (d as isize, 1),
                        0.0,
                        &mut dv[base * d..(base + n) * d],
                    );
                }
                self.accumulate(grads, *w, Tensor::new(wv.shape().to_vec(), dw)?);
                self.accumulate(grads, *v, Tensor::new(vv.shape().to_vec(), dv)?);
            }
            Op::MultiHead {
                q,
                k,
                v,
                rel,
                heads,
                mask,
                probs,
                keep,
            } => {
                self.multi_head_backward(*q, *k, *v, *rel, *heads, mask, probs, keep, &gy, grads)?;
            }
            Op::Dropout { x, keep } => {
                let mut g = gy;
                for (gv, k) in g.data_mut().iter_mut().zip(keep) {
                    *gv *= k;
                }
                self.accumulate(grads, *x, g);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = gy.item();
                let mut dl = vec![0.0; lv.len()];
                for r in 0..lv.rows() {
                    if weights[r] == 0.0 {
                        continue;
                    }
                    let w = weights[r] * scale;
                    for j in 0..c {
                        let onehot = if j == targets[r] { 1.0 } else { 0.0 };
                        dl[r * c + j] = w * (probs[r * c + j] - onehot);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
            Op::Bce {
                logits,
                targets,
                weights,
            } => {
                let lv = self.value(*logits);
                let c = lv.cols();
                let scale = gy.item();
                let mut dl = vec![0.0; lv.len()];
                for r in 0..lv.rows() {
                    if weights[r] == 0.0 {
                        continue;
                    }
                    let w = weights[r] * scale;
                    for j in 0..c {
                        let i = r * c + j;
                        dl[i] = w * (sigmoid(lv.data()[i]) - targets[i]);
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape().to_vec(), dl)?);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn multi_head_backward(
        &self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        rel: Option<RelPos>,
        heads: usize,
        mask: &SeqMask,
        probs: &[f64],
        keep: &Option<Vec<f64>>,
        gy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) -> Result<()> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let dh = d / heads;
        let n = mask.len();
        let scale = 1.0 / (dh as f64).sqrt();
        let rel_vals = rel.map(|r| (self.value(r.keys), self.value(r.values), r.clip));
        let mut dq = vec![0.0; qv.len()];
        let mut dk = vec![0.0; kv.len()];
        let mut dv = vec![0.0; vv.len()];
        let rel_len = rel_vals.map_or(0, |(rk, _, _)| rk.len());
        let mut drk = vec![0.0; rel_len];
        let mut drv = vec![0.0; rel_len];
        let mut dp = vec![0.0; n];
        for b in 0..mask.batch() {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                for i in 0..n {
                    if !mask.is_valid(b, i) {
                        continue;
                    }
                    let r = b * n + i;
                    let go = &gy.row(r)[cols.clone()];
                    let pbase = ((b * heads + h) * n + i) * n;
                    let p = &probs[pbase..pbase + n];
                    for j in 0..n {
                        dp[j] = 0.0;
                        if !mask.is_valid(b, j) {
                            continue;
                        }
                        let kr = b * n + j;
                        let factor = keep.as_ref().map_or(1.0, |kp| kp[pbase + j]);
                        let mut g = dot(go, &vv.row(kr)[cols.clone()]);
                        if let Some((_, rv, clip)) = rel_vals {
                            g += dot(go, rv.row(rel_index(i, j, clip)));
                        }
                        dp[j] = g * factor;
                        let pe = p[j] * factor;
                        if pe != 0.0 {
                            axpy(pe, go, &mut dv[kr * d + h * dh..kr * d + (h + 1) * dh]);
                            if rel_vals.is_some() {
                                let idx = rel_index(i, j, rel.map_or(0, |r| r.clip));
                                axpy(pe, go, &mut drv[idx * dh..(idx + 1) * dh]);
                            }
                        }
                    }
                    softmax_backward(p, &mut dp);
                    let qi = &qv.row(r)[cols.clone()];
                    for j in 0..n {
                        if !mask.is_valid(b, j) || dp[j] == 0.0 {
                            continue;
                        }
                        let kr = b * n + j;
                        let c = dp[j] * scale;
                        axpy(
                            c,
                            &kv.row(kr)[cols.clone()],
                            &mut dq[r * d + h * dh..r * d + (h + 1) * dh],
                        );
                        axpy(c, qi, &mut dk[kr * d + h * dh..kr * d + (h + 1) * dh]);
                        if let Some((rk, _, clip)) = rel_vals {
                            let idx = rel_index(i, j, clip);
                            axpy(c, rk.row(idx), &mut dq[r * d + h * dh..r * d + (h + 1) * dh]);
                            axpy(c, qi, &mut drk[idx * dh..(idx + 1) * dh]);
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, Tensor::new(qv.shape().to_vec(), dq)?);
        self.accumulate(grads, k, Tensor::new(kv.shape().to_vec(), dk)?);
        self.accumulate(grads, v, Tensor::new(vv.shape().to_vec(), dv)?);
        if let (Some(r), Some((rk, _, _))) = (rel, rel_vals) {
            self.accumulate(grads, r.keys, Tensor::new(rk.shape().to_vec(), drk)?);
            self.accumulate(grads, r.values, Tensor::new(rk.shape().to_vec(), drv)?);
        }
        Ok(())
    }
}

/// Per-parameter gradients produced by [`Graph::backward`].
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads[id.0].as_ref()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= c);
        }
    }
}

pub(crate) fn rel_index(query: usize, key: usize, clip: usize) -> usize {
    let offset = key as isize - query as isize;
    (offset.clamp(-(clip as isize), clip as isize) + clip as isize) as usize
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `max(x,0) − x·y + ln(1 + e^{−|x|})`.
pub(crate) fn bce_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over entries where `valid(j)`; the rest become exactly 0.
fn masked_softmax(row: &mut [f64], valid: impl Fn(usize) -> bool) {
    let mut max = f64::NEG_INFINITY;
    for (j, v) in row.iter().enumerate() {
        if valid(j) {
            max = max.max(*v);
        }
    }
    let mut sum = 0.0;
    for (j, v) in row.iter_mut().enumerate() {
        if valid(j) {
            *v = (*v - max).exp();
            sum += *v;
        } else {
            *v = 0.0;
        }
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

pub(crate) fn log_softmax_at(row: &[f64], idx: usize) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    row[idx] - lse
}

/// In place: `g ← p ⊙ (g − ⟨g, p⟩)`.
fn softmax_backward(p: &[f64], g: &mut [f64]) {
    let inner: f64 = p.iter().zip(g.iter()).map(|(a, b)| a * b).sum();
    for (gv, pv) in g.iter_mut().zip(p) {
        *gv = pv * (*gv - inner);
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(a: f64, x: &[f64], y: &mut [f64]) {
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}
