use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::nn::{EncoderLayer, FeedForward, Graph, LayerNorm, Linear, NodeId, ParamStore, SeqMask};

/// `H^rs = Norm(Ĥ + R + FFN(Pool(Ĥ)))`, the pooled term broadcast to every
/// row. `R` may be absent (treated as zero).
#[derive(Clone, Debug)]
pub struct Merge {
    pub ffn: FeedForward,
    pub norm: LayerNorm,
}

impl Merge {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_model: usize, d_ff: usize) -> Result<Self> {
        Ok(Merge {
            ffn: FeedForward::new(store, rng, "merge.ffn", d_model, d_ff)?,
            norm: LayerNorm::new(store, "merge.norm", d_model)?,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        h_hat: NodeId,
        result: Option<NodeId>,
        mask: &Rc<SeqMask>,
    ) -> Result<NodeId> {
        let pooled = g.mean_pool(h_hat, mask)?;
        let global = self.ffn.forward(g, pooled)?;
        let global = g.expand_rows(global, mask.len())?;
        let mut x = h_hat;
        if let Some(r) = result {
            x = g.add(x, r)?;
        }
        let x = g.add(x, global)?;
        self.norm.forward(g, x)
    }
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub layers: Vec<EncoderLayer>,
}

impl Decoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        prefix: &str,
        layers: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        clip: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| EncoderLayer::new(store, rng, &format!("{prefix}.{l}"), d_model, d_ff, heads, clip))
            .collect::<Result<_>>()?;
        Ok(Decoder { layers })
    }

    pub fn forward(&self, g: &mut Graph, x: NodeId, mask: &Rc<SeqMask>) -> Result<NodeId> {
        let mut h = x;
        for layer in &self.layers {
            h = layer.forward(g, h, mask)?;
        }
        Ok(h)
    }
}

/// Intent-count head `W^N · Pool(H^d) + b^N`.
#[derive(Clone, Debug)]
pub struct InpHead {
    pub linear: Linear,
}

impl InpHead {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_model: usize, num_counts: usize) -> Result<Self> {
        Ok(InpHead {
            linear: Linear::new(store, rng, "inp", d_model, num_counts, true)?,
        })
    }

    /// `[B × d_N]` logits.
    pub fn forward(&self, g: &mut Graph, h_d: NodeId, mask: &Rc<SeqMask>) -> Result<NodeId> {
        let pooled = g.mean_pool(h_d, mask)?;
        self.linear.forward(g, pooled)
    }
}

/// Chunk-tag head `softmax(W^T h^d_j + b^T)` over `{O, B, I}`.
#[derive(Clone, Debug)]
pub struct SctHead {
    pub linear: Linear,
}

/// Logits and probabilities of the chunk-tag head.
#[derive(Clone, Copy, Debug)]
pub struct SctOutput {
    pub logits: NodeId,
    pub probs: NodeId,
}

impl SctHead {
    pub const CLASSES: usize = 3;

    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_model: usize) -> Result<Self> {
        Ok(SctHead {
            linear: Linear::new(store, rng, "sct", d_model, Self::CLASSES, true)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, h_d: NodeId) -> Result<SctOutput> {
        let logits = self.linear.forward(g, h_d)?;
        let probs = g.softmax(logits)?;
        Ok(SctOutput { logits, probs })
    }
}
