//! The joint slot-filling / intent-detection network and its ablations.

mod config;
pub mod decoder;
pub mod encoder;
pub mod ran;
pub mod scope;

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{Ablations, ModelConfig};
pub use decoder::{Decoder, InpHead, Merge, SctHead, SctOutput};
pub use encoder::{Encoder, ResultEmbedding, SharedClassifier};
pub use ran::{ran_init, Ran, RanLayer, RanState};
pub use scope::{apply_scope, ScopeRecognizer, ScopeWeights};

use crate::data::Batch;
use crate::error::Result;
use crate::nn::{Graph, NodeId, ParamStore, SeqMask, Tensor};

/// Learned state plus the layout that references it.
///
/// The slot/intent classifier is registered once in the store and used by
/// both the preliminary heads (on the encoder output) and the final heads
/// (on the decoder output).
#[derive(Clone, Debug)]
pub struct Ssran {
    config: ModelConfig,
    store: ParamStore,
    pub encoder: Encoder,
    pub classifier: SharedClassifier,
    pub result_embedding: Option<ResultEmbedding>,
    pub scope: Option<ScopeRecognizer>,
    pub ran: Option<Ran>,
    pub merge: Option<Merge>,
    pub decoder: Decoder,
    pub inp: InpHead,
    pub sct: SctHead,
}

/// Node ids of every intermediate of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Forward {
    pub hidden: NodeId,
    pub prelim_slot: Option<NodeId>,
    pub prelim_intent: Option<NodeId>,
    pub slot_embedding: Option<NodeId>,
    pub intent_embedding: Option<NodeId>,
    pub scope_weights: Option<NodeId>,
    pub scoped_hidden: NodeId,
    pub result: Option<NodeId>,
    pub merged: NodeId,
    pub decoded: NodeId,
    pub slot_logits: NodeId,
    pub intent_logits: NodeId,
    pub inp_logits: NodeId,
    pub sct: SctOutput,
}

/// Plain values of the heads, detached from the graph.
#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub slot_logits: Tensor,
    pub intent_logits: Tensor,
    pub inp_logits: Tensor,
    pub sct_probs: Tensor,
    pub scope: Option<ScopeWeights>,
    pub mask: Rc<SeqMask>,
}

impl Ssran {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let ab = c.ablations;
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            c.token_vocab,
            c.d_model,
            c.d_ff,
            c.heads,
            c.rel_clip,
            c.encoder_layers,
        )?;
        let classifier =
            SharedClassifier::new(&mut store, &mut rng, c.d_model, c.num_slots, c.num_intents)?;
        let result_embedding = if ab.basic_model {
            None
        } else {
            Some(ResultEmbedding::new(
                &mut store,
                &mut rng,
                c.d_model,
                c.num_slots,
                c.num_intents,
            )?)
        };
        let scope = if ab.uses_scope() {
            Some(ScopeRecognizer::new(&mut store, &mut rng, c.d_model)?)
        } else {
            None
        };
        let ran = if ab.uses_ran() {
            Some(Ran::new(
                &mut store,
                &mut rng,
                c.ran_layers,
                c.d_model,
                c.d_ff,
                c.heads,
            )?)
        } else {
            None
        };
        let merge = if ab.basic_model {
            None
        } else {
            Some(Merge::new(&mut store, &mut rng, c.d_model, c.d_ff)?)
        };
        let decoder = Decoder::new(
            &mut store,
            &mut rng,
            "decoder",
            c.decoder_layers,
            c.d_model,
            c.d_ff,
            c.heads,
            c.rel_clip,
        )?;
        let inp = InpHead::new(&mut store, &mut rng, c.d_model, c.num_counts())?;
        let sct = SctHead::new(&mut store, &mut rng, c.d_model)?;
        Ok(Ssran {
            config,
            store,
            encoder,
            classifier,
            result_embedding,
            scope,
            ran,
            merge,
            decoder,
            inp,
            sct,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    /// Graph without dropout over this model's parameters.
    pub fn eval_graph(&self) -> Graph<'_> {
        Graph::new(&self.store)
    }

    /// Graph with the configured dropout.
    pub fn train_graph(&self, seed: u64) -> Graph<'_> {
        Graph::training(&self.store, self.config.dropout, seed)
    }

    pub fn forward(&self, g: &mut Graph, token_ids: &[usize], mask: &Rc<SeqMask>) -> Result<Forward> {
        let hidden = self.encoder.encode(g, token_ids, mask)?;

        let (prelim_slot, prelim_intent, slot_embedding, intent_embedding) =
            match &self.result_embedding {
                Some(emb) => {
                    let (ps, pi) = self.classifier.forward(g, hidden, mask)?;
                    let (s, i) = emb.forward(g, ps, pi, mask)?;
                    (Some(ps), Some(pi), Some(s), Some(i))
                }
                None => (None, None, None, None),
            };

        let mut scope_weights = None;
        let mut scoped_hidden = hidden;
        let mut scoped_slot = slot_embedding;
        let mut scoped_intent = intent_embedding;
        if let (Some(sr), Some(s), Some(i)) = (&self.scope, slot_embedding, intent_embedding) {
            let w = sr.weights(g, hidden, s, i, mask)?;
            scoped_hidden = apply_scope(g, hidden, w)?;
            scoped_slot = Some(apply_scope(g, s, w)?);
            scoped_intent = Some(apply_scope(g, i, w)?);
            scope_weights = Some(w);
        }

        let result = match (&self.ran, scoped_slot, scoped_intent) {
            (Some(ran), Some(s), Some(i)) => Some(ran.forward(g, s, i, mask)?),
            _ => None,
        };

        let merged = match &self.merge {
            Some(m) => m.forward(g, scoped_hidden, result, mask)?,
            None => scoped_hidden,
        };
        let decoded = self.decoder.forward(g, merged, mask)?;
        let (slot_logits, intent_logits) = self.classifier.forward(g, decoded, mask)?;
        let inp_logits = self.inp.forward(g, decoded, mask)?;
        let sct = self.sct.forward(g, decoded)?;
        Ok(Forward {
            hidden,
            prelim_slot,
            prelim_intent,
            slot_embedding,
            intent_embedding,
            scope_weights,
            scoped_hidden,
            result,
            merged,
            decoded,
            slot_logits,
            intent_logits,
            inp_logits,
            sct,
        })
    }

    pub fn forward_batch(&self, g: &mut Graph, batch: &Batch) -> Result<Forward> {
        self.forward(g, &batch.token_ids, &batch.mask)
    }

    /// Eval-mode forward pass returning plain head values.
    pub fn predict_batch(&self, batch: &Batch) -> Result<ModelOutput> {
        let mut g = self.eval_graph();
        let f = self.forward_batch(&mut g, batch)?;
        let scope = match f.scope_weights {
            Some(w) => Some(ScopeWeights::new(
                g.value(w).clone(),
                (*batch.mask).clone(),
            )?),
            None => None,
        };
        Ok(ModelOutput {
            slot_logits: g.value(f.slot_logits).clone(),
            intent_logits: g.value(f.intent_logits).clone(),
            inp_logits: g.value(f.inp_logits).clone(),
            sct_probs: g.value(f.sct.probs).clone(),
            scope,
            mask: Rc::clone(&batch.mask),
        })
    }

    /// Rebuilds the layout for `config` around existing parameter values
    /// (matched by name).
    pub fn from_parts(config: ModelConfig, params: Vec<(String, Tensor)>) -> Result<Self> {
        let mut model = Ssran::new(config, 0)?;
        let expected = model.store.len();
        if params.len() != expected {
            return Err(crate::Error::Checkpoint(format!(
                "{} parameters stored, model layout needs {expected}",
                params.len()
            )));
        }
        for (name, tensor) in params {
            let id = model.store.id(&name).ok_or_else(|| {
                crate::Error::Checkpoint(format!("unexpected parameter {name}"))
            })?;
            model
                .store
                .set(id, tensor)
                .map_err(|e| crate::Error::Checkpoint(e.to_string()))?;
        }
        Ok(model)
    }
}
