//! Decoding model outputs into labels, prediction files, and corpus metrics.

mod decode;
mod metrics;

use std::collections::BTreeSet;
use std::fmt;
use std::rc::Rc;
use std::str::FromStr;

pub use decode::{
    argmax, decode_counts, decode_intents_threshold, decode_intents_topk, decode_slots,
    summed_intent_distribution, top_k,
};
pub use metrics::{
    extract_chunks, extract_chunks_with, has_uncoordinated, intent_accuracy, overall_accuracy,
    sentence_slot_accuracy, slot_f1, slot_f1_with, uncoordinated_slot_rate, Chunk, MetricReport,
    SlotScores,
};

use crate::data::{join_intents, sequential_batches, Utterance, Vocab, Vocabs};
use crate::error::{Error, Result};
use crate::model::Ssran;
use crate::nn::SeqMask;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const EVAL_BATCH: usize = 32;

/// How intent sets are read off the intent logits.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    /// Top-`k` of the summed token softmax, `k` from the count head.
    TopK,
    /// Mean token sigmoid above a threshold.
    Threshold(f64),
}

impl DecodeMode {
    /// Top-k when the count head was trained, threshold otherwise.
    pub fn default_for(model: &Ssran) -> Self {
        if model.config().ablations.no_aux {
            DecodeMode::Threshold(DEFAULT_THRESHOLD)
        } else {
            DecodeMode::TopK
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::TopK => "topk",
            DecodeMode::Threshold(_) => "threshold",
        }
    }
}

impl fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DecodeMode::TopK => write!(f, "topk"),
            DecodeMode::Threshold(t) => write!(f, "threshold({t})"),
        }
    }
}

impl FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(DecodeMode::TopK),
            "threshold" => Ok(DecodeMode::Threshold(DEFAULT_THRESHOLD)),
            other => Err(Error::Config(format!("unknown decode mode {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intents: BTreeSet<String>,
    /// Number of intents decoded.
    pub k: usize,
    /// Row-stochastic `n × n` scope weights, when requested and available.
    pub scope: Option<Vec<Vec<f64>>>,
}

fn encode_tokens(seqs: &[&[String]], vocabs: &Vocabs) -> Result<(Vec<usize>, Rc<SeqMask>)> {
    let lengths: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
    let n = lengths.iter().copied().max().unwrap_or(0);
    let mut ids = vec![Vocabs::PAD_ID; seqs.len() * n];
    for (b, seq) in seqs.iter().enumerate() {
        for (j, tok) in seq.iter().enumerate() {
            ids[b * n + j] = vocabs.token_id(tok);
        }
    }
    Ok((ids, Rc::new(SeqMask::from_lengths(&lengths, n)?)))
}

fn labels(ids: &[usize], vocab: &Vocab) -> Result<Vec<String>> {
    ids.iter()
        .map(|&i| {
            vocab
                .item(i)
                .map(str::to_string)
                .ok_or_else(|| Error::Label(format!("label id {i} outside vocabulary")))
        })
        .collect()
}

/// Predicts slots and intents for each token sequence.
pub fn predict(
    model: &Ssran,
    vocabs: &Vocabs,
    seqs: &[Vec<String>],
    mode: DecodeMode,
    keep_scope: bool,
) -> Result<Vec<Prediction>> {
    if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
        return Err(Error::Encode(format!("sequence {i} has no tokens")));
    }
    let mut out = Vec::with_capacity(seqs.len());
    for idx in sequential_batches(seqs.len(), EVAL_BATCH) {
        let group: Vec<&[String]> = idx.iter().map(|&i| seqs[i].as_slice()).collect();
        let (ids, mask) = encode_tokens(&group, vocabs)?;
        let mut g = model.eval_graph();
        let f = model.forward(&mut g, &ids, &mask)?;
        let slot_ids = decode_slots(g.value(f.slot_logits), &mask)?;
        let intent_ids = match mode {
            DecodeMode::TopK => {
                decode_intents_topk(g.value(f.intent_logits), g.value(f.inp_logits), &mask)?
            }
            DecodeMode::Threshold(t) => decode_intents_threshold(g.value(f.intent_logits), &mask, t)?,
        };
        let scope = match (keep_scope, f.scope_weights) {
            (true, Some(w)) => Some(crate::model::ScopeWeights::new(
                g.value(w).clone(),
                (*mask).clone(),
            )?),
            _ => None,
        };
        for (b, tokens) in group.iter().enumerate() {
            let intents: BTreeSet<String> = labels(&intent_ids[b], &vocabs.intents)?
                .into_iter()
                .collect();
            out.push(Prediction {
                tokens: tokens.to_vec(),
                slots: labels(&slot_ids[b], &vocabs.slots)?,
                k: intents.len(),
                intents,
                scope: scope.as_ref().map(|s| s.matrix(b)),
            });
        }
    }
    Ok(out)
}

/// Predicts on labelled utterances and scores the result.
pub fn evaluate(
    model: &Ssran,
    vocabs: &Vocabs,
    utts: &[Utterance],
    mode: DecodeMode,
) -> Result<(MetricReport, Vec<Prediction>)> {
    let seqs: Vec<Vec<String>> = utts.iter().map(|u| u.tokens.clone()).collect();
    let preds = predict(model, vocabs, &seqs, mode, false)?;
    Ok((score(utts, &preds)?, preds))
}

/// Metrics of `preds` against the aligned gold utterances.
pub fn score(gold: &[Utterance], preds: &[Prediction]) -> Result<MetricReport> {
    if gold.len() != preds.len() {
        return Err(Error::Metric(format!(
            "{} gold utterances, {} predictions",
            gold.len(),
            preds.len()
        )));
    }
    let gold_slots: Vec<Vec<String>> = gold.iter().map(|u| u.slots.clone()).collect();
    let gold_intents: Vec<BTreeSet<String>> = gold.iter().map(|u| u.intents.clone()).collect();
    let pred_slots: Vec<Vec<String>> = preds.iter().map(|p| p.slots.clone()).collect();
    let pred_intents: Vec<BTreeSet<String>> = preds.iter().map(|p| p.intents.clone()).collect();
    MetricReport::compute(&gold_slots, &gold_intents, &pred_slots, &pred_intents)
}

/// One line per prediction: `token:slot` pairs, a tab, `#`-joined intents.
pub fn format_predictions(preds: &[Prediction]) -> String {
    let mut out = String::new();
    for p in preds {
        let pairs: Vec<String> = p
            .tokens
            .iter()
            .zip(&p.slots)
            .map(|(t, s)| format!("{t}:{s}"))
            .collect();
        out.push_str(&pairs.join(" "));
        out.push('\t');
        out.push_str(&join_intents(&p.intents));
        out.push('\n');
    }
    out
}

/// Inverse of [`format_predictions`] (scope matrices are not stored).
pub fn parse_predictions(text: &str) -> Result<Vec<Prediction>> {
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.is_empty() {
            continue;
        }
        let bad = |msg: &str| Error::Parse {
            line: idx + 1,
            msg: msg.to_string(),
        };
        let (pairs, intents) = line.split_once('\t').ok_or_else(|| bad("missing tab"))?;
        let mut tokens = Vec::new();
        let mut slots = Vec::new();
        for pair in pairs.split(' ') {
            let (t, s) = pair.rsplit_once(':').ok_or_else(|| bad("expected token:slot"))?;
            tokens.push(t.to_string());
            slots.push(s.to_string());
        }
        let intents: BTreeSet<String> = intents.split('#').map(str::to_string).collect();
        out.push(Prediction {
            tokens,
            slots,
            k: intents.len(),
            intents,
            scope: None,
        });
    }
    Ok(out)
}

/// Whitespace-tokenised utterances, one per non-empty line.
pub fn parse_raw(text: &str) -> Vec<Vec<String>> {
    text.lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect::<Vec<_>>())
        .filter(|t| !t.is_empty())
        .collect()
}
