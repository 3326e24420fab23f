//! Scope recognizer: a row-stochastic token-to-token weight matrix that
//! mixes hidden states and result embeddings by scope relevance.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{xavier_uniform, Graph, NodeId, ParamId, ParamStore, SeqMask, Tensor};

#[derive(Clone, Debug)]
pub struct ScopeRecognizer {
    /// Query map `W^1: [d_model × d_model]`, applied as `h_j · W^1`.
    pub query: ParamId,
    /// Key map `W^2`, applied as `(h_k + I_k + S_k) · W^2`.
    pub key: ParamId,
    pub d_model: usize,
}

impl ScopeRecognizer {
    pub fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, d_model: usize) -> Result<Self> {
        Ok(ScopeRecognizer {
            query: store.add("scope.query", xavier_uniform(rng, d_model, d_model))?,
            key: store.add("scope.key", xavier_uniform(rng, d_model, d_model))?,
            d_model,
        })
    }

    /// Scope weights `[B·n × n]`: softmax over valid `k` of
    /// `(h_j W^1)·((h_k + I_k + S_k) W^2) / √d_model`.
    pub fn weights(
        &self,
        g: &mut Graph,
        h: NodeId,
        s: NodeId,
        i: NodeId,
        mask: &Rc<SeqMask>,
    ) -> Result<NodeId> {
        let w1 = g.param(self.query);
        let w2 = g.param(self.key);
        let q = g.matmul(h, w1)?;
        let hi = g.add(h, i)?;
        let his = g.add(hi, s)?;
        let k = g.matmul(his, w2)?;
        g.attn_weights(q, k, mask, 1.0 / (self.d_model as f64).sqrt())
    }
}

/// `v_j + Σ_k w_{j,k} v_k`.
pub fn apply_scope(g: &mut Graph, v: NodeId, weights: NodeId) -> Result<NodeId> {
    let mixed = g.mix(weights, v)?;
    g.add(v, mixed)
}

/// Plain-value view of a scope weight matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct ScopeWeights {
    weights: Tensor,
    mask: SeqMask,
}

impl ScopeWeights {
    pub fn new(weights: Tensor, mask: SeqMask) -> Result<Self> {
        if weights.rows() != mask.rows() || weights.cols() != mask.len() {
            return Err(Error::shape(format!(
                "scope weights {:?} for a {}×{} batch",
                weights.shape(),
                mask.batch(),
                mask.len()
            )));
        }
        Ok(ScopeWeights { weights, mask })
    }

    pub fn mask(&self) -> &SeqMask {
        &self.mask
    }

    pub fn raw(&self) -> &Tensor {
        &self.weights
    }

    /// `n_b × n_b` matrix of utterance `b` (row = query token).
    pub fn matrix(&self, b: usize) -> Vec<Vec<f64>> {
        let n = self.mask.len();
        let len = self.mask.count(b);
        (0..len)
            .map(|j| self.weights.row(b * n + j)[..len].to_vec())
            .collect()
    }

    /// CSV rendering of [`ScopeWeights::matrix`].
    pub fn to_csv(&self, b: usize) -> String {
        let mut out = String::new();
        for row in self.matrix(b) {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
        Tensor::new(
            vec![rows, cols],
            (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_maps_give_uniform_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let sr = ScopeRecognizer::new(&mut store, &mut rng, 4).unwrap();
        store.set(sr.query, Tensor::zeros(&[4, 4])).unwrap();
        store.set(sr.key, Tensor::zeros(&[4, 4])).unwrap();
        let mask = Rc::new(SeqMask::from_lengths(&[3, 4], 4).unwrap());
        let mut g = Graph::new(&store);
        let h = g.input(random(&mut rng, 8, 4)).unwrap();
        let s = g.input(random(&mut rng, 8, 4)).unwrap();
        let i = g.input(random(&mut rng, 8, 4)).unwrap();
        let w = sr.weights(&mut g, h, s, i, &mask).unwrap();
        let w = g.value(w);
        assert_eq!(w.row(0), &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0]);
        assert_eq!(w.row(5), &[0.25; 4]);
    }

    #[test]
    fn single_token_doubles() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::new();
        let sr = ScopeRecognizer::new(&mut store, &mut rng, 4).unwrap();
        let mask = Rc::new(SeqMask::full(1));
        let mut g = Graph::new(&store);
        let hv = random(&mut rng, 1, 4);
        let h = g.input(hv.clone()).unwrap();
        let w = sr.weights(&mut g, h, h, h, &mask).unwrap();
        assert_eq!(g.value(w).data(), &[1.0]);
        let out = apply_scope(&mut g, h, w).unwrap();
        for c in 0..4 {
            assert_eq!(g.value(out).at(0, c), 2.0 * hv.at(0, c));
        }
    }

    #[test]
    fn uniform_weights_over_identical_rows() {
        let store = ParamStore::new();
        let mut g = Graph::new(&store);
        let w = g.input(Tensor::filled(&[3, 3], 1.0 / 3.0)).unwrap();
        let v = g
            .input(Tensor::from_rows(&vec![vec![0.5, -2.0]; 3]).unwrap())
            .unwrap();
        let out = apply_scope(&mut g, v, w).unwrap();
        for r in 0..3 {
            let row = g.value(out).row(r);
            assert!((row[0] - 1.0).abs() < 1e-15 && (row[1] + 4.0).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_is_square_over_valid_tokens() {
        let w = Tensor::new(vec![4, 2], vec![0.25, 0.75, 0.5, 0.5, 1.0, 0.0, 0.0, 0.0]).unwrap();
        let mask = SeqMask::from_lengths(&[2, 1], 2).unwrap();
        let sw = ScopeWeights::new(w, mask).unwrap();
        assert_eq!(sw.to_csv(0), "0.25,0.75\n0.5,0.5\n");
        assert_eq!(sw.to_csv(1), "1\n");
    }
}
