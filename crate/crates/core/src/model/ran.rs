//! Result attention network: stacked layers that fuse slot and intent result
//! embeddings through one self-attention and two cross-attentions each.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::nn::{FeedForward, Graph, LayerNorm, MultiHeadAttention, NodeId, ParamStore, SeqMask};

/// `(Ŝ, Î, R̂)` flowing between layers.
#[derive(Clone, Copy, Debug)]
pub struct RanState {
    pub slot: NodeId,
    pub intent: NodeId,
    pub result: NodeId,
}

/// `R̂ = Î + Ŝ`.
pub fn ran_init(g: &mut Graph, slot: NodeId, intent: NodeId) -> Result<RanState> {
    let result = g.add(intent, slot)?;
    Ok(RanState {
        slot,
        intent,
        result,
    })
}

/// Cross-attention plus its residual norm.
#[derive(Clone, Debug)]
pub struct Branch {
    pub attention: MultiHeadAttention,
    pub norm: LayerNorm,
}

#[derive(Clone, Debug)]
pub struct RanLayer {
    pub self_attention: MultiHeadAttention,
    pub self_norm: LayerNorm,
    pub slot_branch: Branch,
    pub intent_branch: Branch,
    pub ffn: FeedForward,
    pub out_norm: LayerNorm,
}

impl RanLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        name: &str,
        d_model: usize,
        d_ff: usize,
        heads: usize,
    ) -> Result<Self> {
        let branch = |store: &mut ParamStore, rng: &mut R, b: &str| -> Result<Branch> {
            Ok(Branch {
                attention: MultiHeadAttention::new(
                    store,
                    rng,
                    &format!("{name}.{b}.attention"),
                    d_model,
                    heads,
                )?,
                norm: LayerNorm::new(store, &format!("{name}.{b}.norm"), d_model)?,
            })
        };
        let self_attention =
            MultiHeadAttention::new(store, rng, &format!("{name}.self.attention"), d_model, heads)?;
        let self_norm = LayerNorm::new(store, &format!("{name}.self.norm"), d_model)?;
        let slot_branch = branch(store, rng, "slot")?;
        let intent_branch = branch(store, rng, "intent")?;
        Ok(RanLayer {
            self_attention,
            self_norm,
            slot_branch,
            intent_branch,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), d_model, d_ff)?,
            out_norm: LayerNorm::new(store, &format!("{name}.out_norm"), d_model)?,
        })
    }

    /// One layer:
    /// `R^att = Norm(R̂ + Att(R̂,R̂,R̂))`,
    /// `Ŝ' = Norm(Ŝ + Att(Ŝ, R^att, Î))`, `Î' = Norm(Î + Att(Î, R^att, Ŝ))`,
    /// `R̂' = Norm(R̃ + FFN(R̃))` with `R̃ = Ŝ' + Î'`.
    pub fn forward(&self, g: &mut Graph, state: RanState, mask: &Rc<SeqMask>) -> Result<RanState> {
        let RanState {
            slot,
            intent,
            result,
        } = state;
        let att = self
            .self_attention
            .forward(g, result, result, result, mask)?;
        let r_att = g.add(result, att)?;
        let r_att = self.self_norm.forward(g, r_att)?;

        let s_att = self
            .slot_branch
            .attention
            .forward(g, slot, r_att, intent, mask)?;
        let s_new = g.add(slot, s_att)?;
        let s_new = self.slot_branch.norm.forward(g, s_new)?;

        let i_att = self
            .intent_branch
            .attention
            .forward(g, intent, r_att, slot, mask)?;
        let i_new = g.add(intent, i_att)?;
        let i_new = self.intent_branch.norm.forward(g, i_new)?;

        let r_sum = g.add(s_new, i_new)?;
        let ff = self.ffn.forward(g, r_sum)?;
        let r_new = g.add(r_sum, ff)?;
        let r_new = self.out_norm.forward(g, r_new)?;
        Ok(RanState {
            slot: s_new,
            intent: i_new,
            result: r_new,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Ran {
    pub layers: Vec<RanLayer>,
}

impl Ran {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        layers: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
    ) -> Result<Self> {
        let layers = (0..layers)
            .map(|l| RanLayer::new(store, rng, &format!("ran.{l}"), d_model, d_ff, heads))
            .collect::<Result<_>>()?;
        Ok(Ran { layers })
    }

    /// Result-semantic vector `R` of the last layer (`Ŝ + Î` with no layers).
    pub fn forward(
        &self,
        g: &mut Graph,
        slot: NodeId,
        intent: NodeId,
        mask: &Rc<SeqMask>,
    ) -> Result<NodeId> {
        let mut state = ran_init(g, slot, intent)?;
        for layer in &self.layers {
            state = layer.forward(g, state, mask)?;
        }
        Ok(state.result)
    }
}
