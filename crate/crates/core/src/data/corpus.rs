use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// One labelled utterance: tokens, a BIO slot label per token, and the set
/// of intents it expresses.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slots: Vec<String>,
    pub intents: BTreeSet<String>,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, slots: Vec<String>, intents: BTreeSet<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Label("utterance without tokens".into()));
        }
        if tokens.len() != slots.len() {
            return Err(Error::Label(format!(
                "{} tokens but {} slot labels",
                tokens.len(),
                slots.len()
            )));
        }
        if let Some(bad) = slots.iter().find(|s| !is_bio_label(s)) {
            return Err(Error::Label(format!("malformed BIO label {bad:?}")));
        }
        if intents.is_empty() || intents.iter().any(|i| i.is_empty()) {
            return Err(Error::Label("empty intent".into()));
        }
        Ok(Utterance {
            tokens,
            slots,
            intents,
        })
    }

    /// Convenience constructor for literals.
    pub fn from_strs(tokens: &[&str], slots: &[&str], intents: &[&str]) -> Result<Self> {
        Utterance::new(
            tokens.iter().map(|s| s.to_string()).collect(),
            slots.iter().map(|s| s.to_string()).collect(),
            intents.iter().map(|s| s.to_string()).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// `O`, or `B-<tag>` / `I-<tag>` with a non-empty tag.
pub fn is_bio_label(label: &str) -> bool {
    label == "O"
        || ((label.starts_with("B-") || label.starts_with("I-")) && label.len() > 2)
}

/// Parses the block corpus format: one `token slot` line per token, then a
/// line with the `#`-joined intents, blocks separated by blank lines.
pub fn parse_corpus(raw: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    for (idx, line) in raw.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            if !block.is_empty() {
                out.push(parse_block(&block)?);
                block.clear();
            }
        } else {
            block.push((idx + 1, line));
        }
    }
    if !block.is_empty() {
        out.push(parse_block(&block)?);
    }
    Ok(out)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Vec<Utterance>> {
    let raw = fs::read_to_string(path)?;
    parse_corpus(&raw)
}

fn parse_block(lines: &[(usize, &str)]) -> Result<Utterance> {
    let (&(intent_line, intent_text), token_lines) =
        lines.split_last().expect("non-empty block");
    if token_lines.is_empty() {
        return Err(Error::Parse {
            line: intent_line,
            msg: "block has an intent line but no tokens".into(),
        });
    }
    let mut tokens = Vec::with_capacity(token_lines.len());
    let mut slots = Vec::with_capacity(token_lines.len());
    for &(line, text) in token_lines {
        let mut fields = text.split(' ');
        let (Some(token), Some(slot), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(Error::Parse {
                line,
                msg: format!("expected \"<token> <slot>\", got {text:?}"),
            });
        };
        if token.is_empty() {
            return Err(Error::Parse {
                line,
                msg: "empty token".into(),
            });
        }
        if !is_bio_label(slot) {
            return Err(Error::Parse {
                line,
                msg: format!("malformed BIO label {slot:?}"),
            });
        }
        tokens.push(token.to_string());
        slots.push(slot.to_string());
    }
    let intent_text = intent_text.trim();
    if intent_text.contains(' ') {
        return Err(Error::Parse {
            line: intent_line,
            msg: format!("block must end with an intent line, got {intent_text:?}"),
        });
    }
    let mut intents = BTreeSet::new();
    for part in intent_text.split('#') {
        if part.is_empty() {
            return Err(Error::Parse {
                line: intent_line,
                msg: format!("empty intent in {intent_text:?}"),
            });
        }
        intents.insert(part.to_string());
    }
    Utterance::new(tokens, slots, intents).map_err(|e| Error::Parse {
        line: intent_line,
        msg: e.to_string(),
    })
}

/// Writes utterances back in the block format.
pub fn format_corpus(utts: &[Utterance]) -> String {
    let mut out = String::new();
    for (i, u) in utts.iter().enumerate() {
        if i > 0 {
            out.push('\n');
        }
        for (t, s) in u.tokens.iter().zip(&u.slots) {
            out.push_str(t);
            out.push(' ');
            out.push_str(s);
            out.push('\n');
        }
        out.push_str(&join_intents(&u.intents));
        out.push('\n');
    }
    out
}

pub fn join_intents(intents: &BTreeSet<String>) -> String {
    intents.iter().cloned().collect::<Vec<_>>().join("#")
}

/// Removes utterances longer than `max_len`, returning how many were dropped.
pub fn drop_long(utts: Vec<Utterance>, max_len: usize) -> (Vec<Utterance>, usize) {
    let before = utts.len();
    let kept: Vec<Utterance> = utts.into_iter().filter(|u| u.len() <= max_len).collect();
    let dropped = before - kept.len();
    if dropped > 0 {
        log::warn!("dropped {dropped} utterances longer than {max_len} tokens");
    }
    (kept, dropped)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIGURE_LIKE: &str = "\
get O
weather O
in O
boston B-city
and O
list O
airports O
in O
denver B-city
atis_weather#atis_airport
";

    #[test]
    fn two_intent_block() {
        let utts = parse_corpus(FIGURE_LIKE).unwrap();
        assert_eq!(utts.len(), 1);
        assert_eq!(utts[0].len(), 9);
        assert_eq!(utts[0].intents.len(), 2);
    }

    #[test]
    fn minimal_block() {
        let utts = parse_corpus("hello O\ngreet\n").unwrap();
        assert_eq!(utts[0].tokens, vec!["hello"]);
        assert_eq!(utts[0].intents.len(), 1);
    }

    #[test]
    fn missing_slot_label_names_line() {
        let err = parse_corpus("a O\nb\nc O\nintent\n").unwrap_err();
        match err {
            Error::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn empty_intent_rejected() {
        let err = parse_corpus("a O\nx##y\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn bad_bio_label_rejected() {
        let err = parse_corpus("ok O\na X-city\nintent\n\nb O\ni\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
        assert!(parse_corpus("a B-\ni\n").is_err());
    }

    #[test]
    fn blocks_and_blank_lines() {
        let raw = "a O\ni1\n\nb B-x\nc I-x\ni2#i1\n\n";
        let utts = parse_corpus(raw).unwrap();
        assert_eq!(utts.len(), 2);
        assert_eq!(parse_corpus(&format_corpus(&utts)).unwrap(), utts);
    }

    #[test]
    fn long_utterances_are_dropped() {
        let utts = parse_corpus("a O\ni\n\na O\nb O\nc O\ni\n").unwrap();
        let (kept, dropped) = drop_long(utts, 2);
        assert_eq!((kept.len(), dropped), (1, 1));
    }
}
