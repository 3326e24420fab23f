//! Scores a prediction file against a labelled corpus, as `ssran eval` does
//! for a checkpoint.
//!
//! cargo run --example score_predictions -- gold.txt predictions.txt
//!
//! Without arguments, scores a corrupted copy of a synthetic corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssran::data::{read_corpus, synth};
use ssran::infer::{parse_predictions, score, Prediction};

fn main() -> ssran::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (gold, preds) = if let [gold, pred] = args.as_slice() {
        (read_corpus(gold)?, parse_predictions(&std::fs::read_to_string(pred)?)?)
    } else {
        let gold = synth::generate(200, 1, 3, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let preds = gold
            .iter()
            .map(|u| {
                let mut slots = u.slots.clone();
                for s in slots.iter_mut() {
                    if rng.gen_bool(0.05) {
                        *s = "O".into();
                    }
                }
                let mut intents = u.intents.clone();
                if rng.gen_bool(0.1) {
                    intents.pop_last();
                    intents.insert("get_weather".into());
                }
                Prediction {
                    tokens: u.tokens.clone(),
                    slots,
                    k: intents.len(),
                    intents,
                    scope: None,
                }
            })
            .collect();
        (gold, preds)
    };
    let report = score(&gold, &preds)?;
    print!("{report}");
    print!("{}", report.to_kv());
    Ok(())
}
