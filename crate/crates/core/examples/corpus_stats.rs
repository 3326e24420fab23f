//! Corpus statistics: split sizes, vocabulary sizes and the distribution of
//! intents per utterance.
//!
//! cargo run --example corpus_stats -- train.txt [dev.txt test.txt]
//!
//! Without arguments a synthetic corpus is described instead.

use std::collections::BTreeMap;

use ssran::data::{read_corpus, synth, Utterance, Vocabs};

fn describe(name: &str, utts: &[Utterance]) {
    let tokens: usize = utts.iter().map(Utterance::len).sum();
    let mut per_count: BTreeMap<usize, usize> = BTreeMap::new();
    for u in utts {
        *per_count.entry(u.intents.len()).or_default() += 1;
    }
    println!(
        "{name}: {} utterances, mean length {:.2}, intents per utterance {per_count:?}",
        utts.len(),
        tokens as f64 / utts.len().max(1) as f64
    );
}

fn main() -> ssran::Result<()> {
    let paths: Vec<String> = std::env::args().skip(1).collect();
    let splits: Vec<(String, Vec<Utterance>)> = if paths.is_empty() {
        vec![("synthetic".into(), synth::generate(500, 1, 3, 7))]
    } else {
        paths
            .iter()
            .map(|p| Ok((p.clone(), read_corpus(p)?)))
            .collect::<ssran::Result<_>>()?
    };
    for (name, utts) in &splits {
        describe(name, utts);
    }
    let vocabs = Vocabs::build(&splits[0].1)?;
    println!(
        "vocabulary from {}: {} tokens, {} slot labels, {} intents",
        splits[0].0,
        vocabs.corpus_token_count(),
        vocabs.slots.len(),
        vocabs.intents.len()
    );
    for (name, utts) in &splits[1..] {
        if let Err(e) = vocabs.check_covers(utts) {
            println!("{name}: {e}");
        }
    }
    Ok(())
}
