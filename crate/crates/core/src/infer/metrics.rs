use std::collections::BTreeSet;
use std::fmt;

use crate::error::{Error, Result};

/// A labelled span `start..=end` of slot type `kind`.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Chunk {
    pub kind: String,
    pub start: usize,
    pub end: usize,
}

fn split(label: &str) -> (char, &str) {
    match label.split_once('-') {
        Some(("B", t)) if !t.is_empty() => ('B', t),
        Some(("I", t)) if !t.is_empty() => ('I', t),
        _ => ('O', ""),
    }
}

/// Chunks of a BIO sequence with conlleval's lenient opening: an `I-x` that
/// does not continue an `x` chunk starts a new one.
pub fn extract_chunks<S: AsRef<str>>(slots: &[S]) -> BTreeSet<Chunk> {
    extract_chunks_with(slots, false)
}

/// As [`extract_chunks`]; with `strict` an orphan `I-x` is read as `O`.
pub fn extract_chunks_with<S: AsRef<str>>(slots: &[S], strict: bool) -> BTreeSet<Chunk> {
    let mut out = BTreeSet::new();
    let mut open: Option<(String, usize)> = None;
    for (j, label) in slots.iter().enumerate() {
        let (tag, kind) = split(label.as_ref());
        let continues = tag == 'I' && matches!(&open, Some((k, _)) if k == kind);
        if continues {
            continue;
        }
        if let Some((k, s)) = open.take() {
            out.insert(Chunk {
                kind: k,
                start: s,
                end: j - 1,
            });
        }
        if tag == 'B' || (tag == 'I' && !strict) {
            open = Some((kind.to_string(), j));
        }
    }
    if let Some((k, s)) = open {
        out.insert(Chunk {
            kind: k,
            start: s,
            end: slots.len() - 1,
        });
    }
    out
}

/// Micro-averaged chunk precision / recall / F1 with the raw counts.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SlotScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub correct: usize,
    pub gold_chunks: usize,
    pub pred_chunks: usize,
}

impl SlotScores {
    fn from_counts(correct: usize, gold_chunks: usize, pred_chunks: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, pred_chunks);
        let recall = ratio(correct, gold_chunks);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        SlotScores {
            precision,
            recall,
            f1,
            correct,
            gold_chunks,
            pred_chunks,
        }
    }
}

fn aligned<A, B>(gold: &[A], pred: &[B], what: &str) -> Result<()> {
    if gold.len() != pred.len() {
        return Err(Error::Metric(format!(
            "{what}: {} gold against {} predicted",
            gold.len(),
            pred.len()
        )));
    }
    Ok(())
}

pub fn slot_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<SlotScores> {
    slot_f1_with(gold, pred, false)
}

pub fn slot_f1_with<S: AsRef<str>>(
    gold: &[Vec<S>],
    pred: &[Vec<S>],
    strict: bool,
) -> Result<SlotScores> {
    aligned(gold, pred, "slot_f1")?;
    let (mut correct, mut n_gold, mut n_pred) = (0, 0, 0);
    for (i, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.len() != p.len() {
            return Err(Error::Metric(format!(
                "utterance {i}: {} gold labels, {} predicted",
                g.len(),
                p.len()
            )));
        }
        let gc = extract_chunks_with(g, strict);
        let pc = extract_chunks_with(p, strict);
        correct += gc.intersection(&pc).count();
        n_gold += gc.len();
        n_pred += pc.len();
    }
    Ok(SlotScores::from_counts(correct, n_gold, n_pred))
}

/// Fraction of exact intent-set matches.
pub fn intent_accuracy<T: Ord>(gold: &[BTreeSet<T>], pred: &[BTreeSet<T>]) -> Result<f64> {
    aligned(gold, pred, "intent_accuracy")?;
    Ok(fraction(gold.iter().zip(pred).filter(|(g, p)| g == p).count(), gold.len()))
}

/// Fraction of utterances whose slot sequence matches exactly.
pub fn sentence_slot_accuracy<S: PartialEq>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<f64> {
    aligned(gold, pred, "sentence_slot_accuracy")?;
    Ok(fraction(gold.iter().zip(pred).filter(|(g, p)| g == p).count(), gold.len()))
}

/// Fraction of utterances with both the slot sequence and the intent set
/// exactly right.
pub fn overall_accuracy<S: PartialEq, T: Ord>(
    gold_slots: &[Vec<S>],
    gold_intents: &[BTreeSet<T>],
    pred_slots: &[Vec<S>],
    pred_intents: &[BTreeSet<T>],
) -> Result<f64> {
    aligned(gold_slots, pred_slots, "overall_accuracy")?;
    aligned(gold_slots, gold_intents, "overall_accuracy")?;
    aligned(gold_slots, pred_intents, "overall_accuracy")?;
    let hits = (0..gold_slots.len())
        .filter(|&i| gold_slots[i] == pred_slots[i] && gold_intents[i] == pred_intents[i])
        .count();
    Ok(fraction(hits, gold_slots.len()))
}

/// Whether some `I-x` lacks a preceding `B-x` / `I-x`.
pub fn has_uncoordinated<S: AsRef<str>>(slots: &[S]) -> bool {
    let mut prev: (char, &str) = ('O', "");
    for label in slots {
        let cur = split(label.as_ref());
        if cur.0 == 'I' && (prev.0 == 'O' || prev.1 != cur.1) {
            return true;
        }
        prev = cur;
    }
    false
}

/// Fraction of predicted sequences with at least one uncoordinated slot.
pub fn uncoordinated_slot_rate<S: AsRef<str>>(preds: &[Vec<S>]) -> f64 {
    fraction(preds.iter().filter(|p| has_uncoordinated(p)).count(), preds.len())
}

fn fraction(hits: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Corpus-level scores.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub utterances: usize,
    pub intent_accuracy: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub slot_f1: f64,
    pub sentence_slot_accuracy: f64,
    pub overall_accuracy: f64,
    pub uncoordinated_slot_rate: f64,
}

impl MetricReport {
    pub fn compute(
        gold_slots: &[Vec<String>],
        gold_intents: &[BTreeSet<String>],
        pred_slots: &[Vec<String>],
        pred_intents: &[BTreeSet<String>],
    ) -> Result<Self> {
        let slots = slot_f1(gold_slots, pred_slots)?;
        Ok(MetricReport {
            utterances: gold_slots.len(),
            intent_accuracy: intent_accuracy(gold_intents, pred_intents)?,
            slot_precision: slots.precision,
            slot_recall: slots.recall,
            slot_f1: slots.f1,
            sentence_slot_accuracy: sentence_slot_accuracy(gold_slots, pred_slots)?,
            overall_accuracy: overall_accuracy(gold_slots, gold_intents, pred_slots, pred_intents)?,
            uncoordinated_slot_rate: uncoordinated_slot_rate(pred_slots),
        })
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "utterances={}\nintent_accuracy={:.6}\nslot_precision={:.6}\nslot_recall={:.6}\n\
             slot_f1={:.6}\nsentence_slot_accuracy={:.6}\noverall_accuracy={:.6}\n\
             uncoordinated_slot_rate={:.6}\n",
            self.utterances,
            self.intent_accuracy,
            self.slot_precision,
            self.slot_recall,
            self.slot_f1,
            self.sentence_slot_accuracy,
            self.overall_accuracy,
            self.uncoordinated_slot_rate
        )
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<12} {:>10} {:>10} {:>10}", "", "Intent(Acc)", "Slot(F1)", "Overall(Acc)")?;
        writeln!(
            f,
            "{:<12} {:>10.1} {:>10.1} {:>10.1}",
            "SSRAN",
            100.0 * self.intent_accuracy,
            100.0 * self.slot_f1,
            100.0 * self.overall_accuracy
        )?;
        writeln!(
            f,
            "slot P/R {:.1}/{:.1}  sentence-slot acc {:.1}  uncoordinated {:.1}%  ({} utterances)",
            100.0 * self.slot_precision,
            100.0 * self.slot_recall,
            100.0 * self.sentence_slot_accuracy,
            100.0 * self.uncoordinated_slot_rate,
            self.utterances
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn chunks(labels: &[&str]) -> Vec<(String, usize, usize)> {
        extract_chunks(labels)
            .into_iter()
            .map(|c| (c.kind, c.start, c.end))
            .collect()
    }

    #[test]
    fn chunk_examples() {
        assert_eq!(
            chunks(&["B-a", "I-a", "O", "B-b"]),
            vec![("a".into(), 0, 1), ("b".into(), 3, 3)]
        );
        assert_eq!(chunks(&["I-a", "I-a"]), vec![("a".into(), 0, 1)]);
        assert!(chunks(&["O", "O"]).is_empty());
        assert_eq!(
            chunks(&["B-a", "I-b", "B-a", "B-a"]),
            vec![("a".into(), 0, 0), ("a".into(), 2, 2), ("a".into(), 3, 3), ("b".into(), 1, 1)]
        );
        assert!(extract_chunks_with(&["O", "I-a"], true).is_empty());
    }

    #[test]
    fn f1_edge_cases() {
        let gold = vec![vec!["B-a", "I-a", "O"]];
        assert_eq!(slot_f1(&gold, &gold).unwrap().f1, 1.0);
        let none = vec![vec!["O", "O", "O"]];
        let s = slot_f1(&gold, &none).unwrap();
        assert_eq!((s.recall, s.f1), (0.0, 0.0));
        assert_eq!(slot_f1(&none, &none).unwrap().f1, 0.0);
        assert!(slot_f1(&gold, &[vec!["O"]]).is_err());
        assert!(slot_f1(&gold, &[]).is_err());
    }

    #[test]
    fn intent_accuracy_examples() {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let gold = vec![set(&["A", "B"]), set(&["C"])];
        assert_eq!(intent_accuracy(&gold, &gold).unwrap(), 1.0);
        assert_eq!(intent_accuracy(&gold, &[set(&["A"]), set(&["C"])]).unwrap(), 0.5);
    }

    #[test]
    fn overall_needs_both() {
        let set = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<BTreeSet<_>>();
        let slots = vec![vec!["B-a"]];
        let acc = overall_accuracy(&slots, &[set(&["A"])], &slots, &[set(&["B"])]).unwrap();
        assert_eq!(acc, 0.0);
        let acc = overall_accuracy(&slots, &[set(&["A"])], &slots, &[set(&["A"])]).unwrap();
        assert_eq!(acc, 1.0);
    }

    #[test]
    fn uncoordinated_examples() {
        assert!(!has_uncoordinated(&["B-a", "I-a"]));
        assert!(has_uncoordinated(&["O", "I-a"]));
        assert!(has_uncoordinated(&["B-a", "I-b"]));
        assert!(has_uncoordinated(&["I-a"]));
        assert_eq!(uncoordinated_slot_rate(&[vec!["O", "I-a"], vec!["B-a"]]), 0.5);
    }

    #[test]
    fn report_renders() {
        let slots = vec![vec!["B-a".to_string(), "O".to_string()]];
        let intents = vec![["x".to_string()].into_iter().collect()];
        let r = MetricReport::compute(&slots, &intents, &slots, &intents).unwrap();
        assert!(r.to_kv().contains("overall_accuracy=1.000000"));
        assert!(r.to_string().contains("100.0"));
    }
}
