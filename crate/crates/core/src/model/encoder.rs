use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::nn::{embedding_normal, EncoderLayer, Graph, Linear, NodeId, ParamId, ParamStore, SeqMask};

/// Token embedding followed by a stack of relative-position encoder layers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub embedding: ParamId,
    pub layers: Vec<EncoderLayer>,
}

impl Encoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        vocab: usize,
        d_model: usize,
        d_ff: usize,
        heads: usize,
        clip: usize,
        layers: usize,
    ) -> Result<Self> {
        let embedding = store.add("embedding.tokens", embedding_normal(rng, vocab, d_model))?;
        let layers = (0..layers)
            .map(|l| {
                EncoderLayer::new(store, rng, &format!("encoder.{l}"), d_model, d_ff, heads, clip)
            })
            .collect::<Result<_>>()?;
        Ok(Encoder { embedding, layers })
    }

    /// Hidden states `H: [B·n × d_model]`.
    pub fn encode(&self, g: &mut Graph, token_ids: &[usize], mask: &Rc<SeqMask>) -> Result<NodeId> {
        let table = g.param(self.embedding);
        let h = g.embedding(table, token_ids)?;
        let d = g.value(h).cols() as f64;
        let mut h = g.scale(h, d.sqrt())?;
        for layer in &self.layers {
            h = layer.forward(g, h, mask)?;
        }
        Ok(h)
    }
}

/// Slot and intent classifiers over `h_j ⊕ Pool(H)`, shared by the
/// preliminary and final heads.
#[derive(Clone, Debug)]
pub struct SharedClassifier {
    pub slot: Linear,
    pub intent: Linear,
}

impl SharedClassifier {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        d_model: usize,
        num_slots: usize,
        num_intents: usize,
    ) -> Result<Self> {
        Ok(SharedClassifier {
            slot: Linear::new(store, rng, "classifier.slot", 2 * d_model, num_slots, true)?,
            intent: Linear::new(store, rng, "classifier.intent", 2 * d_model, num_intents, true)?,
        })
    }

    /// Per-token `(slot_logits, intent_logits)`; the masked mean of `h` is
    /// appended to every row before classification.
    pub fn forward(&self, g: &mut Graph, h: NodeId, mask: &Rc<SeqMask>) -> Result<(NodeId, NodeId)> {
        let pooled = g.mean_pool(h, mask)?;
        let pooled = g.expand_rows(pooled, mask.len())?;
        let features = g.concat_cols(h, pooled)?;
        let slot = self.slot.forward(g, features)?;
        let intent = self.intent.forward(g, features)?;
        Ok((slot, intent))
    }
}

/// Label-embedding tables `E^S: [d_e × d_s]` and `E^I: [d_e × d_i]`.
#[derive(Clone, Debug)]
pub struct ResultEmbedding {
    pub slot: ParamId,
    pub intent: ParamId,
}

impl ResultEmbedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        rng: &mut R,
        d_e: usize,
        num_slots: usize,
        num_intents: usize,
    ) -> Result<Self> {
        // Columns are label embeddings; draw them as [labels × d_e] rows and
        // lay them out transposed.
        let slot = transpose(embedding_normal(rng, num_slots, d_e));
        let intent = transpose(embedding_normal(rng, num_intents, d_e));
        Ok(ResultEmbedding {
            slot: store.add("result_embedding.slot", slot)?,
            intent: store.add("result_embedding.intent", intent)?,
        })
    }

    /// `(S, I)`: expected label embedding under the softmaxed logits, zero
    /// on padded rows.
    pub fn forward(
        &self,
        g: &mut Graph,
        slot_logits: NodeId,
        intent_logits: NodeId,
        mask: &Rc<SeqMask>,
    ) -> Result<(NodeId, NodeId)> {
        let s = embed(g, slot_logits, self.slot, mask)?;
        let i = embed(g, intent_logits, self.intent, mask)?;
        Ok((s, i))
    }
}

fn embed(g: &mut Graph, logits: NodeId, table: ParamId, mask: &Rc<SeqMask>) -> Result<NodeId> {
    let p = g.softmax(logits)?;
    let e = g.param(table);
    let v = g.linear(p, e, None)?;
    g.mask_rows(v, mask)
}

fn transpose(t: crate::nn::Tensor) -> crate::nn::Tensor {
    let (r, c) = (t.rows(), t.cols());
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            data[j * r + i] = t.at(i, j);
        }
    }
    crate::nn::Tensor::new(vec![c, r], data).expect("consistent shape")
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::Tensor;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_weight_classifier_emits_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let clf = SharedClassifier::new(&mut store, &mut rng, 4, 3, 2).unwrap();
        store.set(clf.slot.weight, Tensor::zeros(&[3, 8])).unwrap();
        store
            .set(clf.slot.bias.unwrap(), Tensor::vector(vec![0.5, -1.0, 2.0]))
            .unwrap();
        let mask = Rc::new(SeqMask::full(3));
        let mut g = Graph::new(&store);
        let h = g.input(random(&mut rng, 3, 4)).unwrap();
        let (slot, _) = clf.forward(&mut g, h, &mask).unwrap();
        for r in 0..3 {
            assert_eq!(g.value(slot).row(r), &[0.5, -1.0, 2.0]);
        }
    }

    #[test]
    fn identical_hidden_rows_give_identical_logits() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let clf = SharedClassifier::new(&mut store, &mut rng, 4, 3, 2).unwrap();
        let row: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let h = Tensor::from_rows(&[row.clone(), vec![0.3, 0.1, -0.2, 0.9], row]).unwrap();
        let mask = Rc::new(SeqMask::full(3));
        let mut g = Graph::new(&store);
        let h = g.input(h).unwrap();
        let (slot, intent) = clf.forward(&mut g, h, &mask).unwrap();
        assert_eq!(g.value(slot).row(0), g.value(slot).row(2));
        assert_eq!(g.value(intent).row(0), g.value(intent).row(2));
    }

    #[test]
    fn dominant_logit_selects_embedding_column() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let emb = ResultEmbedding::new(&mut store, &mut rng, 4, 3, 2).unwrap();
        let mask = Rc::new(SeqMask::full(1));
        let mut g = Graph::new(&store);
        let ls = g.input(Tensor::from_rows(&[vec![0.0, 80.0, 0.0]]).unwrap()).unwrap();
        let li = g.input(Tensor::from_rows(&[vec![0.0, 0.0]]).unwrap()).unwrap();
        let (s, i) = emb.forward(&mut g, ls, li, &mask).unwrap();
        let es = store.get(emb.slot);
        let ei = store.get(emb.intent);
        for c in 0..4 {
            assert!((g.value(s).at(0, c) - es.at(c, 1)).abs() < 1e-12);
            let mean = (ei.at(c, 0) + ei.at(c, 1)) / 2.0;
            assert!((g.value(i).at(0, c) - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn padded_rows_of_result_embeddings_are_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut store = ParamStore::new();
        let emb = ResultEmbedding::new(&mut store, &mut rng, 4, 3, 2).unwrap();
        let mask = Rc::new(SeqMask::from_lengths(&[1, 2], 2).unwrap());
        let mut g = Graph::new(&store);
        let ls = g.input(random(&mut rng, 4, 3)).unwrap();
        let li = g.input(random(&mut rng, 4, 2)).unwrap();
        let (s, i) = emb.forward(&mut g, ls, li, &mask).unwrap();
        assert!(g.value(s).row(1).iter().all(|v| *v == 0.0));
        assert!(g.value(i).row(1).iter().all(|v| *v == 0.0));
        assert!(g.value(s).row(2).iter().any(|v| *v != 0.0));
    }
}
