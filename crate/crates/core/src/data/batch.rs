use std::collections::BTreeSet;
use std::rc::Rc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ChunkTag, Utterance, Vocabs};
use crate::error::{Error, Result};
use crate::nn::{SeqMask, Tensor};

/// Projects BIO slot labels onto their chunk tags.
pub fn derive_sct_labels<S: AsRef<str>>(slots: &[S]) -> Vec<ChunkTag> {
    slots
        .iter()
        .map(|s| match s.as_ref().as_bytes().first() {
            Some(b'B') => ChunkTag::B,
            Some(b'I') => ChunkTag::I,
            _ => ChunkTag::O,
        })
        .collect()
}

/// Intent-count class of an utterance: `|intents| − 1`, within `num_counts`.
pub fn derive_inp_label(intents: &BTreeSet<String>, num_counts: usize) -> Result<usize> {
    let m = intents.len();
    if m == 0 || m > num_counts {
        return Err(Error::Label(format!(
            "{m} intents cannot be encoded with {num_counts} count classes"
        )));
    }
    Ok(m - 1)
}

/// Padded id matrices of a group of utterances.
#[derive(Clone, Debug)]
pub struct Batch {
    pub token_ids: Vec<usize>,
    pub slot_ids: Vec<usize>,
    /// `[B × d_i]` 0/1 matrix.
    pub intent_multihot: Tensor,
    pub chunk_ids: Vec<usize>,
    pub intent_count: Vec<usize>,
    pub mask: Rc<SeqMask>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.mask.batch()
    }

    pub fn max_len(&self) -> usize {
        self.mask.len()
    }

    /// Intent-count class per utterance.
    pub fn inp_labels(&self) -> Vec<usize> {
        self.intent_count.iter().map(|c| c - 1).collect()
    }

    /// `1/B` on valid rows, 0 on padding: per-utterance sums averaged over
    /// the batch.
    pub fn row_weights(&self) -> Vec<f64> {
        let inv = 1.0 / self.size() as f64;
        self.mask
            .as_slice()
            .iter()
            .map(|v| if *v { inv } else { 0.0 })
            .collect()
    }

    /// The utterance-level multi-hot target repeated on every row.
    pub fn token_intent_targets(&self) -> Tensor {
        let d = self.intent_multihot.cols();
        let n = self.max_len();
        let mut data = Vec::with_capacity(self.size() * n * d);
        for b in 0..self.size() {
            for _ in 0..n {
                data.extend_from_slice(self.intent_multihot.row(b));
            }
        }
        Tensor::new(vec![self.size() * n, d], data).expect("consistent shape")
    }
}

/// Encodes `utts` padded to `n_max` positions.
pub fn encode_batch(utts: &[&Utterance], vocabs: &Vocabs, n_max: usize) -> Result<Batch> {
    let b = utts.len();
    let d_i = vocabs.intents.len();
    let mut token_ids = vec![Vocabs::PAD_ID; b * n_max];
    let mut slot_ids = vec![0; b * n_max];
    let mut chunk_ids = vec![ChunkTag::O.id(); b * n_max];
    let mut multihot = vec![0.0; b * d_i];
    let mut intent_count = Vec::with_capacity(b);
    let mut lengths = Vec::with_capacity(b);
    for (i, u) in utts.iter().enumerate() {
        if u.len() > n_max {
            return Err(Error::Encode(format!(
                "utterance {i} has {} tokens, more than {n_max}",
                u.len()
            )));
        }
        let chunks = derive_sct_labels(&u.slots);
        for (j, (tok, slot)) in u.tokens.iter().zip(&u.slots).enumerate() {
            token_ids[i * n_max + j] = vocabs.token_id(tok);
            slot_ids[i * n_max + j] = vocabs.slot_id(slot)?;
            chunk_ids[i * n_max + j] = chunks[j].id();
        }
        for intent in &u.intents {
            multihot[i * d_i + vocabs.intent_id(intent)?] = 1.0;
        }
        derive_inp_label(&u.intents, vocabs.num_counts())?;
        intent_count.push(u.intents.len());
        lengths.push(u.len());
    }
    Ok(Batch {
        token_ids,
        slot_ids,
        intent_multihot: Tensor::new(vec![b, d_i], multihot)?,
        chunk_ids,
        intent_count,
        mask: Rc::new(SeqMask::from_lengths(&lengths, n_max)?),
    })
}

/// Encodes a batch padded to its longest utterance.
pub fn encode_tight(utts: &[&Utterance], vocabs: &Vocabs) -> Result<Batch> {
    let n_max = utts.iter().map(|u| u.len()).max().unwrap_or(0);
    encode_batch(utts, vocabs, n_max)
}

/// Inverse of [`encode_batch`] for one row, through the vocabularies.
pub fn decode_row(batch: &Batch, b: usize, vocabs: &Vocabs) -> Result<Utterance> {
    let n = batch.max_len();
    let len = batch.mask.count(b);
    let item = |v: &super::Vocab, id: usize| {
        v.item(id)
            .map(str::to_string)
            .ok_or_else(|| Error::Encode(format!("id {id} out of range")))
    };
    let tokens = (0..len)
        .map(|j| item(&vocabs.tokens, batch.token_ids[b * n + j]))
        .collect::<Result<Vec<_>>>()?;
    let slots = (0..len)
        .map(|j| item(&vocabs.slots, batch.slot_ids[b * n + j]))
        .collect::<Result<Vec<_>>>()?;
    let intents = batch
        .intent_multihot
        .row(b)
        .iter()
        .enumerate()
        .filter(|(_, v)| **v > 0.5)
        .map(|(i, _)| item(&vocabs.intents, i))
        .collect::<Result<BTreeSet<_>>>()?;
    Utterance::new(tokens, slots, intents)
}

/// Groups utterance indices into batches of similar length.
///
/// Indices are shuffled with `seed`, stably sorted by length, cut into
/// batches of `batch_size`, and the batch order is shuffled again. The
/// result depends only on `(lengths, batch_size, seed)`.
pub fn bucket_batches(lengths: &[usize], batch_size: usize, seed: u64) -> Vec<Vec<usize>> {
    let batch_size = batch_size.max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    batches.shuffle(&mut rng);
    batches
}

/// Consecutive batches in corpus order.
pub fn sequential_batches(len: usize, batch_size: usize) -> Vec<Vec<usize>> {
    let idx: Vec<usize> = (0..len).collect();
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn utt(tokens: &[&str], slots: &[&str], intents: &[&str]) -> Utterance {
        Utterance::from_strs(tokens, slots, intents).unwrap()
    }

    #[test]
    fn sct_projection() {
        assert_eq!(
            derive_sct_labels(&["B-city", "I-city", "O"]),
            vec![ChunkTag::B, ChunkTag::I, ChunkTag::O]
        );
        assert_eq!(derive_sct_labels(&["O", "O", "O"]), vec![ChunkTag::O; 3]);
        assert_eq!(
            derive_sct_labels(&["B-a", "B-b", "I-b"]),
            vec![ChunkTag::B, ChunkTag::B, ChunkTag::I]
        );
    }

    #[test]
    fn inp_label_is_count_minus_one() {
        let set = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        assert_eq!(derive_inp_label(&set(&["A"]), 3).unwrap(), 0);
        assert_eq!(derive_inp_label(&set(&["A", "B"]), 3).unwrap(), 1);
        assert!(derive_inp_label(&set(&["A", "B", "C", "D"]), 3).is_err());
    }

    #[test]
    fn padding_mask_and_multihot() {
        let train = vec![
            utt(&["a", "b", "c"], &["O", "O", "O"], &["A"]),
            utt(&["a", "b", "c", "d", "e"], &["O"; 5], &["A", "C"]),
            utt(&["x"], &["O"], &["B"]),
        ];
        let v = Vocabs::build(&train).unwrap();
        let batch = encode_batch(&[&train[0], &train[1]], &v, 5).unwrap();
        assert_eq!(
            batch.mask.as_slice(),
            &[true, true, true, false, false, true, true, true, true, true]
        );
        assert_eq!(batch.token_ids[3], Vocabs::PAD_ID);
        assert_eq!(batch.intent_multihot.row(1), &[1.0, 0.0, 1.0]);
        assert_eq!(batch.intent_count, vec![1, 2]);
    }

    #[test]
    fn oov_token_is_unk_and_unknown_label_errors() {
        let train = vec![utt(&["a"], &["O"], &["A"])];
        let v = Vocabs::build(&train).unwrap();
        let oov = utt(&["zzz"], &["O"], &["A"]);
        let batch = encode_batch(&[&oov], &v, 1).unwrap();
        assert_eq!(batch.token_ids[0], Vocabs::UNK_ID);
        let bad = utt(&["a"], &["B-x"], &["A"]);
        assert!(matches!(encode_batch(&[&bad], &v, 1), Err(Error::Encode(_))));
        let bad = utt(&["a"], &["O"], &["Q"]);
        assert!(matches!(encode_batch(&[&bad], &v, 1), Err(Error::Encode(_))));
    }

    #[test]
    fn bucketing_is_deterministic() {
        let lengths = [5, 3, 9, 1, 4, 4, 7, 2];
        let a = bucket_batches(&lengths, 3, 11);
        assert_eq!(a, bucket_batches(&lengths, 3, 11));
        let mut all: Vec<usize> = a.concat();
        all.sort_unstable();
        assert_eq!(all, (0..8).collect::<Vec<_>>());
    }

    fn arb_utterance() -> impl Strategy<Value = Utterance> {
        let label = prop_oneof![
            Just("O".to_string()),
            "[ab]".prop_map(|t| format!("B-{t}")),
            "[ab]".prop_map(|t| format!("I-{t}")),
        ];
        (1usize..8)
            .prop_flat_map(move |n| {
                (
                    proptest::collection::vec("[a-e]{1,2}", n),
                    proptest::collection::vec(label.clone(), n),
                    proptest::collection::btree_set("[pqr]", 1..3),
                )
            })
            .prop_map(|(t, s, i)| Utterance::new(t, s, i).unwrap())
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(utts in proptest::collection::vec(arb_utterance(), 1..6)) {
            let v = Vocabs::build(&utts).unwrap();
            let refs: Vec<&Utterance> = utts.iter().collect();
            let batch = encode_tight(&refs, &v).unwrap();
            let total: usize = utts.iter().map(Utterance::len).sum();
            prop_assert_eq!(batch.mask.total(), total);
            for (b, u) in utts.iter().enumerate() {
                prop_assert_eq!(&decode_row(&batch, b, &v).unwrap(), u);
                let sum: f64 = batch.intent_multihot.row(b).iter().sum();
                prop_assert_eq!(sum as usize, batch.intent_count[b]);
            }
        }

        #[test]
        fn chunk_tags_follow_slots(u in arb_utterance()) {
            let tags = derive_sct_labels(&u.slots);
            prop_assert_eq!(tags.len(), u.slots.len());
            for (t, s) in tags.iter().zip(&u.slots) {
                prop_assert_eq!(*t == ChunkTag::O, s == "O");
            }
        }
    }
}
