use std::rc::Rc;

use rand::Rng;

use super::graph::{Graph, NodeId, RelPos};
use super::params::{embedding_normal, xavier_uniform};
use super::{ParamId, ParamStore, SeqMask, Tensor};
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.add(format!("{name}.weight"), xavier_uniform(rng, d_out, d_in))?;
        let bias = if bias {
            Some(store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?)
        } else {
            None
        };
        Ok(Linear { weight, bias })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let w = g.param(self.weight);
        let b = self.bias.map(|b| g.param(b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gain: store.add(format!("{name}.gain"), Tensor::filled(&[d], 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two affine maps with a ReLU in between; dropout on the hidden layer.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        d_ff: usize,
    ) -> Result<Self> {
        Ok(FeedForward {
            inner: Linear::new(store, rng, &format!("{name}.inner"), d_model, d_ff, true)?,
            outer: Linear::new(store, rng, &format!("{name}.outer"), d_ff, d_model, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.inner.forward(g, x)?;
        let h = g.relu(h)?;
        let h = g.dropout(h)?;
        self.outer.forward(g, h)
    }
}

/// Learned relative-position key/value tables shared across heads.
#[derive(Clone, Debug)]
pub struct RelativePositions {
    pub keys: ParamId,
    pub values: ParamId,
    pub clip: usize,
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub relative: Option<RelativePositions>,
}

impl MultiHeadAttention {
    /// Content-only attention (no position terms).
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
    ) -> Result<Self> {
        Ok(MultiHeadAttention {
            query: Linear::new(store, rng, &format!("{name}.query"), d_model, d_model, true)?,
            key: Linear::new(store, rng, &format!("{name}.key"), d_model, d_model, true)?,
            value: Linear::new(store, rng, &format!("{name}.value"), d_model, d_model, true)?,
            output: Linear::new(store, rng, &format!("{name}.output"), d_model, d_model, true)?,
            heads,
            relative: None,
        })
    }

    /// Self-attention with relative-position representations clipped at
    /// `clip`.
    pub fn with_relative<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        heads: usize,
        clip: usize,
    ) -> Result<Self> {
        let mut attn = Self::new(store, rng, name, d_model, heads)?;
        let d_head = d_model / heads;
        let width = 2 * clip + 1;
        attn.relative = Some(RelativePositions {
            keys: store.add(
                format!("{name}.rel_keys"),
                embedding_normal(rng, width, d_head),
            )?,
            values: store.add(
                format!("{name}.rel_values"),
                embedding_normal(rng, width, d_head),
            )?,
            clip,
        });
        Ok(attn)
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        query: NodeId,
        key: NodeId,
        value: NodeId,
        mask: &Rc<SeqMask>,
    ) -> Result<NodeId> {
        Ok(self.forward_with_weights(g, query, key, value, mask)?.0)
    }

    /// Like [`MultiHeadAttention::forward`], also returning the node that
    /// caches the attention weights (see [`Graph::attention_probs`]).
    pub fn forward_with_weights(
        &self,
        g: &mut Graph,
        query: NodeId,
        key: NodeId,
        value: NodeId,
        mask: &Rc<SeqMask>,
    ) -> Result<(NodeId, NodeId)> {
        let q = self.query.forward(g, query)?;
        let k = self.key.forward(g, key)?;
        let v = self.value.forward(g, value)?;
        let rel = self.relative.as_ref().map(|r| RelPos {
            keys: g.param(r.keys),
            values: g.param(r.values),
            clip: r.clip,
        });
        let att = g.multi_head(q, k, v, self.heads, rel, mask)?;
        Ok((self.output.forward(g, att)?, att))
    }
}

/// Post-norm Transformer encoder layer with relative-position attention.
#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub attention: MultiHeadAttention,
    pub attn_norm: LayerNorm,
    pub ffn: FeedForward,
    pub ffn_norm: LayerNorm,
}

impl EncoderLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        clip: usize,
    ) -> Result<Self> {
        Ok(EncoderLayer {
            attention: MultiHeadAttention::with_relative(
                store,
                rng,
                &format!("{name}.attention"),
                d_model,
                heads,
                clip,
            )?,
            attn_norm: LayerNorm::new(store, &format!("{name}.attn_norm"), d_model)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d_model, d_ff)?,
            ffn_norm: LayerNorm::new(store, &format!("{name}.ffn_norm"), d_model)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mask: &Rc<SeqMask>) -> Result<NodeId> {
        let att = self.attention.forward(g, x, x, x, mask)?;
        let x = g.add(x, att)?;
        let x = self.attn_norm.forward(g, x)?;
        let ff = self.ffn.forward(g, x)?;
        let x = g.add(x, ff)?;
        self.ffn_norm.forward(g, x)
    }
}
