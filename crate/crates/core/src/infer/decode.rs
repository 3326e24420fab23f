use crate::error::{Error, Result};
use crate::nn::{sigmoid, SeqMask, Tensor};

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest scores in ascending index order; ties go to
/// the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked: Vec<usize> = order.into_iter().take(k).collect();
    picked.sort_unstable();
    picked
}

fn check(logits: &Tensor, mask: &SeqMask) -> Result<()> {
    if logits.rows() != mask.rows() {
        return Err(Error::shape(format!(
            "{} logit rows for a {}×{} mask",
            logits.rows(),
            mask.batch(),
            mask.len()
        )));
    }
    if !logits.is_finite() {
        return Err(Error::NonFinite("logits".into()));
    }
    Ok(())
}

/// Per-token argmax label ids of each utterance, padding omitted.
pub fn decode_slots(logits: &Tensor, mask: &SeqMask) -> Result<Vec<Vec<usize>>> {
    check(logits, mask)?;
    let n = mask.len();
    Ok((0..mask.batch())
        .map(|b| {
            (0..n)
                .filter(|&j| mask.is_valid(b, j))
                .map(|j| argmax(logits.row(b * n + j)))
                .collect()
        })
        .collect())
}

/// Intent count per utterance: argmax of the count head plus one.
pub fn decode_counts(inp_logits: &Tensor) -> Vec<usize> {
    (0..inp_logits.rows())
        .map(|b| argmax(inp_logits.row(b)) + 1)
        .collect()
}

/// Per-class sum over valid tokens of the per-token softmax.
pub fn summed_intent_distribution(logits: &Tensor, mask: &SeqMask) -> Result<Vec<Vec<f64>>> {
    check(logits, mask)?;
    let (n, d) = (mask.len(), logits.cols());
    let mut out = vec![vec![0.0; d]; mask.batch()];
    for (b, acc) in out.iter_mut().enumerate() {
        for j in (0..n).filter(|&j| mask.is_valid(b, j)) {
            let row = logits.row(b * n + j);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for (a, v) in acc.iter_mut().zip(row) {
                *a += (v - m).exp() / z;
            }
        }
    }
    Ok(out)
}

/// Top-`k` intent ids per utterance, `k` taken from the count head.
pub fn decode_intents_topk(
    logits: &Tensor,
    inp_logits: &Tensor,
    mask: &SeqMask,
) -> Result<Vec<Vec<usize>>> {
    if inp_logits.rows() != mask.batch() {
        return Err(Error::shape(format!(
            "{} count rows for a batch of {}",
            inp_logits.rows(),
            mask.batch()
        )));
    }
    let ks = decode_counts(inp_logits);
    let scores = summed_intent_distribution(logits, mask)?;
    Ok(scores
        .iter()
        .zip(ks)
        .map(|(s, k)| top_k(s, k.min(s.len())))
        .collect())
}

/// Classes whose mean token sigmoid exceeds `threshold`; the single best
/// class when none does.
pub fn decode_intents_threshold(
    logits: &Tensor,
    mask: &SeqMask,
    threshold: f64,
) -> Result<Vec<Vec<usize>>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::Config(format!("threshold {threshold} outside (0, 1)")));
    }
    check(logits, mask)?;
    let (n, d) = (mask.len(), logits.cols());
    let mut out = Vec::with_capacity(mask.batch());
    for b in 0..mask.batch() {
        let mut mean = vec![0.0; d];
        let count = mask.count(b).max(1) as f64;
        for j in (0..n).filter(|&j| mask.is_valid(b, j)) {
            for (m, v) in mean.iter_mut().zip(logits.row(b * n + j)) {
                *m += sigmoid(*v) / count;
            }
        }
        let picked: Vec<usize> = (0..d).filter(|&c| mean[c] > threshold).collect();
        out.push(if picked.is_empty() {
            vec![argmax(&mean)]
        } else {
            picked
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    #[test]
    fn argmax_tie_goes_low() {
        assert_eq!(argmax(&[0.0, 0.0, 3.0, 1.0, 1.0, 3.0]), 2);
        assert_eq!(argmax(&[-1.0]), 0);
    }

    #[test]
    fn one_hot_slots() {
        let logits = Tensor::from_rows(&[
            vec![0.0, 1.0, 0.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![5.0, 5.0, 5.0],
        ])
        .unwrap();
        let mask = SeqMask::from_lengths(&[2, 1], 2).unwrap();
        assert_eq!(decode_slots(&logits, &mask).unwrap(), vec![vec![1, 0], vec![2]]);
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k(&[0.5, 0.3, 0.2], 2), vec![0, 1]);
        assert_eq!(top_k(&[0.5, 0.3, 0.2], 3), vec![0, 1, 2]);
        assert_eq!(top_k(&[0.2, 0.4, 0.4], 1), vec![1]);
    }

    #[test]
    fn threshold_examples() {
        let logit = |p: f64| (p / (1.0 - p)).ln();
        let mask = SeqMask::full(1);
        let t = Tensor::from_rows(&[vec![logit(0.9), logit(0.4), logit(0.7)]]).unwrap();
        assert_eq!(decode_intents_threshold(&t, &mask, 0.5).unwrap(), vec![vec![0, 2]]);
        let t = Tensor::from_rows(&[vec![logit(0.1), logit(0.4), logit(0.3)]]).unwrap();
        assert_eq!(decode_intents_threshold(&t, &mask, 0.5).unwrap(), vec![vec![1]]);
        assert!(decode_intents_threshold(&t, &mask, 1.0).is_err());
    }

    fn logits_strategy() -> impl Strategy<Value = (Vec<usize>, usize, Vec<f64>, Vec<f64>)> {
        (prop::collection::vec(1usize..5, 1..4), 1usize..6).prop_flat_map(|(lengths, d)| {
            let n = *lengths.iter().max().unwrap();
            let rows = lengths.len() * n;
            (
                Just(lengths.clone()),
                Just(d),
                prop::collection::vec(-4.0f64..4.0, rows * d),
                prop::collection::vec(-4.0f64..4.0, lengths.len() * d),
            )
        })
    }

    proptest! {
        #[test]
        fn topk_returns_k_and_matches_sort_oracle((lengths, d, li, ln) in logits_strategy()) {
            let n = *lengths.iter().max().unwrap();
            let mask = SeqMask::from_lengths(&lengths, n).unwrap();
            let logits = Tensor::new(vec![lengths.len() * n, d], li).unwrap();
            let inp = Tensor::new(vec![lengths.len(), d], ln).unwrap();
            let got = decode_intents_topk(&logits, &inp, &mask).unwrap();
            let ks = decode_counts(&inp);
            let sums = summed_intent_distribution(&logits, &mask).unwrap();
            for b in 0..lengths.len() {
                prop_assert_eq!(got[b].len(), ks[b]);
                let mut pairs: Vec<(f64, usize)> = sums[b].iter().copied().zip(0..d).collect();
                pairs.sort_by(|x, y| y.0.partial_cmp(&x.0).unwrap().then(x.1.cmp(&y.1)));
                let mut oracle: Vec<usize> = pairs[..ks[b]].iter().map(|p| p.1).collect();
                oracle.sort_unstable();
                prop_assert_eq!(&got[b], &oracle);
            }
        }

        #[test]
        fn decoding_ignores_per_token_shifts(
            (lengths, d, li, ln) in logits_strategy(),
            shift in -50.0f64..50.0,
        ) {
            let n = *lengths.iter().max().unwrap();
            let mask = SeqMask::from_lengths(&lengths, n).unwrap();
            let logits = Tensor::new(vec![lengths.len() * n, d], li).unwrap();
            let inp = Tensor::new(vec![lengths.len(), d], ln).unwrap();
            let mut shifted = logits.clone();
            for r in 0..shifted.rows() {
                let c = shift * (r as f64 + 1.0) / 7.0;
                shifted.row_mut(r).iter_mut().for_each(|v| *v += c);
            }
            prop_assert_eq!(
                decode_slots(&logits, &mask).unwrap(),
                decode_slots(&shifted, &mask).unwrap()
            );
            let a = summed_intent_distribution(&logits, &mask).unwrap();
            let b = summed_intent_distribution(&shifted, &mask).unwrap();
            for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
            let top = |l: &Tensor| decode_intents_topk(l, &inp, &mask).unwrap();
            // Near-ties can flip under rounding; only compare clear orderings.
            let clear = a.iter().all(|s| {
                let mut v = s.clone();
                v.sort_by(|x, y| y.partial_cmp(x).unwrap());
                v.windows(2).all(|w| w[0] - w[1] > 1e-9)
            });
            if clear {
                prop_assert_eq!(top(&logits), top(&shifted));
            }
        }
    }
}
