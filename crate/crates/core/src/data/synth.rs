//! A small multi-intent grammar for smoke training without external corpora.
//!
//! Each utterance concatenates sub-utterances for distinct intents joined by
//! a connective, in the style of the mixed ATIS/SNIPS corpora.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Utterance;

/// Template piece: literal word or a slot drawn from a value list.
#[derive(Clone, Copy, Debug)]
enum Piece {
    Word(&'static str),
    Slot(&'static str, &'static [&'static str]),
}

use Piece::{Slot, Word};

const CITIES: &[&str] = &[
    "boston",
    "denver",
    "dallas",
    "new york",
    "san francisco",
    "los angeles",
    "salt lake city",
];
const TIMES: &[&str] = &["7 am", "noon", "six thirty", "9 pm", "midnight"];
const ARTISTS: &[&str] = &["adele", "the beatles", "miles davis", "queen"];
const GENRES: &[&str] = &["jazz", "rock", "classical music", "hip hop"];
const RESTAURANTS: &[&str] = &["the olive garden", "luigi 's", "blue moon cafe"];
const PARTY: &[&str] = &["two", "four", "six"];
const BOOKS: &[&str] = &["dune", "the hobbit", "war and peace"];
const RATINGS: &[&str] = &["one", "three", "five"];
const AIRLINES: &[&str] = &["delta", "united", "american airlines"];

struct IntentTemplates {
    name: &'static str,
    templates: &'static [&'static [Piece]],
}

const GRAMMAR: &[IntentTemplates] = &[
    IntentTemplates {
        name: "get_weather",
        templates: &[
            &[Word("what"), Word("is"), Word("the"), Word("weather"), Word("in"), Slot("city", CITIES)],
            &[Word("weather"), Word("forecast"), Word("for"), Slot("city", CITIES)],
        ],
    },
    IntentTemplates {
        name: "find_flight",
        templates: &[
            &[
                Word("show"),
                Word("flights"),
                Word("from"),
                Slot("fromloc", CITIES),
                Word("to"),
                Slot("toloc", CITIES),
            ],
            &[Word("list"), Slot("airline", AIRLINES), Word("flights"), Word("to"), Slot("toloc", CITIES)],
        ],
    },
    IntentTemplates {
        name: "play_music",
        templates: &[
            &[Word("play"), Word("something"), Word("by"), Slot("artist", ARTISTS)],
            &[Word("put"), Word("on"), Word("some"), Slot("genre", GENRES)],
        ],
    },
    IntentTemplates {
        name: "set_alarm",
        templates: &[
            &[Word("set"), Word("an"), Word("alarm"), Word("for"), Slot("time", TIMES)],
            &[Word("wake"), Word("me"), Word("up"), Word("at"), Slot("time", TIMES)],
        ],
    },
    IntentTemplates {
        name: "book_restaurant",
        templates: &[
            &[
                Word("book"),
                Word("a"),
                Word("table"),
                Word("for"),
                Slot("party_size", PARTY),
                Word("at"),
                Slot("restaurant", RESTAURANTS),
            ],
            &[Word("reserve"), Slot("restaurant", RESTAURANTS), Word("tonight")],
        ],
    },
    IntentTemplates {
        name: "rate_book",
        templates: &[
            &[Word("rate"), Slot("book", BOOKS), Slot("rating", RATINGS), Word("stars")],
            &[Word("give"), Slot("book", BOOKS), Slot("rating", RATINGS), Word("points")],
        ],
    },
];

const CONNECTIVES: &[&str] = &["and", "and then", "also"];

/// Intent labels the grammar can produce.
pub fn intent_names() -> Vec<&'static str> {
    GRAMMAR.iter().map(|g| g.name).collect()
}

/// Generates `count` utterances with between `min_intents` and `max_intents`
/// distinct intents each, deterministically from `seed`.
pub fn generate(count: usize, min_intents: usize, max_intents: usize, seed: u64) -> Vec<Utterance> {
    let max_intents = max_intents.clamp(1, GRAMMAR.len());
    let min_intents = min_intents.clamp(1, max_intents);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let m = rng.gen_range(min_intents..=max_intents);
            let mut chosen: Vec<&IntentTemplates> = GRAMMAR.iter().collect();
            chosen.shuffle(&mut rng);
            chosen.truncate(m);
            let mut tokens = Vec::new();
            let mut slots = Vec::new();
            let mut intents = BTreeSet::new();
            for (k, intent) in chosen.iter().enumerate() {
                if k > 0 {
                    let conn = CONNECTIVES.choose(&mut rng).expect("non-empty");
                    for w in conn.split(' ') {
                        tokens.push(w.to_string());
                        slots.push("O".to_string());
                    }
                }
                let template = intent.templates.choose(&mut rng).expect("non-empty");
                for piece in template.iter() {
                    match *piece {
                        Word(w) => {
                            tokens.push(w.to_string());
                            slots.push("O".to_string());
                        }
                        Slot(tag, values) => {
                            let value = values.choose(&mut rng).expect("non-empty");
                            for (i, w) in value.split(' ').enumerate() {
                                tokens.push(w.to_string());
                                let prefix = if i == 0 { "B" } else { "I" };
                                slots.push(format!("{prefix}-{tag}"));
                            }
                        }
                    }
                }
                intents.insert(intent.name.to_string());
            }
            Utterance::new(tokens, slots, intents).expect("grammar yields valid utterances")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_intent_utterances() {
        let utts = generate(50, 2, 2, 3);
        assert_eq!(utts.len(), 50);
        assert!(utts.iter().all(|u| u.intents.len() == 2));
        assert_eq!(utts, generate(50, 2, 2, 3));
    }

    #[test]
    fn multiword_values_use_inside_tags() {
        let utts = generate(200, 1, 3, 9);
        assert!(utts.iter().any(|u| u.slots.iter().any(|s| s.starts_with("I-"))));
    }
}
