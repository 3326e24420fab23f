//! Training objectives as graph nodes. Every loss is summed per utterance
//! and averaged over the batch.

use crate::data::Batch;
use crate::error::Result;
use crate::model::Forward;
use crate::nn::{Graph, NodeId};

/// Token-level slot cross-entropy.
pub fn loss_sf(g: &mut Graph, slot_logits: NodeId, batch: &Batch) -> Result<NodeId> {
    g.cross_entropy(slot_logits, &batch.slot_ids, &batch.row_weights())
}

/// Binary cross-entropy of every token against the utterance's multi-hot
/// intent vector.
pub fn loss_id(g: &mut Graph, intent_logits: NodeId, batch: &Batch) -> Result<NodeId> {
    g.bce_with_logits(intent_logits, &batch.token_intent_targets(), &batch.row_weights())
}

/// `α·L_SF + (1−α)·L_ID`.
pub fn loss_slu(g: &mut Graph, l_sf: NodeId, l_id: NodeId, alpha: f64) -> Result<NodeId> {
    let a = g.scale(l_sf, alpha)?;
    let b = g.scale(l_id, 1.0 - alpha)?;
    g.add(a, b)
}

/// Cross-entropy of the intent-count head, one term per utterance.
pub fn loss_inp(g: &mut Graph, inp_logits: NodeId, batch: &Batch) -> Result<NodeId> {
    let w = vec![1.0 / batch.size() as f64; batch.size()];
    g.cross_entropy(inp_logits, &batch.inp_labels(), &w)
}

/// Token-level chunk-tag cross-entropy.
pub fn loss_sct(g: &mut Graph, sct_logits: NodeId, batch: &Batch) -> Result<NodeId> {
    g.cross_entropy(sct_logits, &batch.chunk_ids, &batch.row_weights())
}

/// `L_SLU + λ·(L_INP + L_SCT)`.
pub fn loss_total(
    g: &mut Graph,
    l_slu: NodeId,
    l_inp: NodeId,
    l_sct: NodeId,
    lambda: f64,
) -> Result<NodeId> {
    let aux = g.add(l_inp, l_sct)?;
    let aux = g.scale(aux, lambda)?;
    g.add(l_slu, aux)
}

/// Node ids of every loss term of one batch.
#[derive(Clone, Copy, Debug)]
pub struct Losses {
    pub total: NodeId,
    pub sf: NodeId,
    pub id: NodeId,
    pub inp: NodeId,
    pub sct: NodeId,
}

impl Losses {
    pub fn build(
        g: &mut Graph,
        f: &Forward,
        batch: &Batch,
        alpha: f64,
        lambda: f64,
    ) -> Result<Self> {
        let sf = loss_sf(g, f.slot_logits, batch)?;
        let id = loss_id(g, f.intent_logits, batch)?;
        let inp = loss_inp(g, f.inp_logits, batch)?;
        let sct = loss_sct(g, f.sct.logits, batch)?;
        let slu = loss_slu(g, sf, id, alpha)?;
        let total = loss_total(g, slu, inp, sct, lambda)?;
        Ok(Losses {
            total,
            sf,
            id,
            inp,
            sct,
        })
    }

    /// `[total, sf, id, inp, sct]` values.
    pub fn values(&self, g: &Graph) -> [f64; 5] {
        [self.total, self.sf, self.id, self.inp, self.sct].map(|n| g.value(n).item())
    }
}
