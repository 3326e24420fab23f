use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::Utterance;
use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";

/// Bijective map between strings and dense ids.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Vocab {
    items: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_items<I, S>(items: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocab::default();
        for item in items {
            let item = item.into();
            if vocab.index.contains_key(&item) {
                return Err(Error::Label(format!("duplicate vocabulary entry {item:?}")));
            }
            vocab.index.insert(item.clone(), vocab.items.len());
            vocab.items.push(item);
        }
        Ok(vocab)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn id(&self, item: &str) -> Option<usize> {
        self.index.get(item).copied()
    }

    pub fn item(&self, id: usize) -> Option<&str> {
        self.items.get(id).map(String::as_str)
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    /// One entry per line; the line number is the id.
    pub fn to_lines(&self) -> String {
        let mut s = self.items.join("\n");
        s.push('\n');
        s
    }

    pub fn from_lines(text: &str) -> Result<Self> {
        Vocab::from_items(text.lines().filter(|l| !l.is_empty()))
    }
}

/// Chunk tag of the slot chunking task.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ChunkTag {
    O = 0,
    B = 1,
    I = 2,
}

impl ChunkTag {
    pub const ALL: [ChunkTag; 3] = [ChunkTag::O, ChunkTag::B, ChunkTag::I];

    pub fn id(self) -> usize {
        self as usize
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ChunkTag::O => "O",
            ChunkTag::B => "B",
            ChunkTag::I => "I",
        }
    }
}

/// Token, slot, intent and chunk vocabularies of one model.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabs {
    pub tokens: Vocab,
    pub slots: Vocab,
    pub intents: Vocab,
    pub chunks: Vocab,
}

impl Vocabs {
    pub const PAD_ID: usize = 0;
    pub const UNK_ID: usize = 1;

    /// Tokens (plus padding and unknown entries), slot labels and intents
    /// seen in `train`, each sorted lexicographically.
    pub fn build(train: &[Utterance]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Config("cannot build vocabularies from an empty corpus".into()));
        }
        let tokens: BTreeSet<&str> = train
            .iter()
            .flat_map(|u| u.tokens.iter().map(String::as_str))
            .filter(|t| *t != PAD && *t != UNK)
            .collect();
        let slots: BTreeSet<&str> = train
            .iter()
            .flat_map(|u| u.slots.iter().map(String::as_str))
            .collect();
        let intents: BTreeSet<&str> = train
            .iter()
            .flat_map(|u| u.intents.iter().map(String::as_str))
            .collect();
        Vocabs::from_parts(
            [PAD, UNK].into_iter().chain(tokens).collect(),
            slots.into_iter().collect(),
            intents.into_iter().collect(),
        )
    }

    pub fn from_parts(tokens: Vec<&str>, slots: Vec<&str>, intents: Vec<&str>) -> Result<Self> {
        let tokens = Vocab::from_items(tokens)?;
        if tokens.item(Self::PAD_ID) != Some(PAD) || tokens.item(Self::UNK_ID) != Some(UNK) {
            return Err(Error::Label(format!(
                "token vocabulary must start with {PAD} and {UNK}"
            )));
        }
        let slots = Vocab::from_items(slots)?;
        let intents = Vocab::from_items(intents)?;
        if slots.is_empty() || intents.is_empty() {
            return Err(Error::Label("slot and intent vocabularies must be non-empty".into()));
        }
        Ok(Vocabs {
            tokens,
            slots,
            intents,
            chunks: Vocab::from_items(ChunkTag::ALL.map(ChunkTag::as_str))?,
        })
    }

    pub fn token_id(&self, token: &str) -> usize {
        self.tokens.id(token).unwrap_or(Self::UNK_ID)
    }

    pub fn slot_id(&self, slot: &str) -> Result<usize> {
        self.slots
            .id(slot)
            .ok_or_else(|| Error::Encode(format!("unknown slot label {slot:?}")))
    }

    pub fn intent_id(&self, intent: &str) -> Result<usize> {
        self.intents
            .id(intent)
            .ok_or_else(|| Error::Encode(format!("unknown intent {intent:?}")))
    }

    /// Number of intent-count classes; equal to the number of intents.
    pub fn num_counts(&self) -> usize {
        self.intents.len()
    }

    /// Number of distinct tokens excluding the padding and unknown entries.
    pub fn corpus_token_count(&self) -> usize {
        self.tokens.len() - 2
    }

    /// Writes `token.vocab`, `slot.vocab` and `intent.vocab` into `dir`.
    pub fn save_dir(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        fs::write(dir.join("token.vocab"), self.tokens.to_lines())?;
        fs::write(dir.join("slot.vocab"), self.slots.to_lines())?;
        fs::write(dir.join("intent.vocab"), self.intents.to_lines())?;
        Ok(())
    }

    pub fn load_dir(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let tokens = fs::read_to_string(dir.join("token.vocab"))?;
        let slots = fs::read_to_string(dir.join("slot.vocab"))?;
        let intents = fs::read_to_string(dir.join("intent.vocab"))?;
        Vocabs::from_text(&tokens, &slots, &intents)
    }

    pub fn from_text(tokens: &str, slots: &str, intents: &str) -> Result<Self> {
        let split = |t: &'_ str| -> Vec<String> {
            t.lines().filter(|l| !l.is_empty()).map(str::to_string).collect()
        };
        let (t, s, i) = (split(tokens), split(slots), split(intents));
        Vocabs::from_parts(
            t.iter().map(String::as_str).collect(),
            s.iter().map(String::as_str).collect(),
            i.iter().map(String::as_str).collect(),
        )
    }

    /// Checks that every slot label and intent of `utts` is known.
    pub fn check_covers(&self, utts: &[Utterance]) -> Result<()> {
        for (i, u) in utts.iter().enumerate() {
            for s in &u.slots {
                if self.slots.id(s).is_none() {
                    return Err(Error::VocabMismatch(format!(
                        "utterance {i}: slot label {s:?} is not in the model's slot vocabulary"
                    )));
                }
            }
            for intent in &u.intents {
                if self.intents.id(intent).is_none() {
                    return Err(Error::VocabMismatch(format!(
                        "utterance {i}: intent {intent:?} is not in the model's intent vocabulary"
                    )));
                }
            }
        }
        Ok(())
    }
}
