//! Trains briefly on synthetic two-intent data and prints the scope weights
//! of one utterance as a token-by-token table.
//!
//! cargo run --release --example scope_matrix

use ssran::data::synth;
use ssran::infer::{predict, DecodeMode};
use ssran::train::{fit, TrainConfig};

fn main() -> ssran::Result<()> {
    let train = synth::generate(160, 2, 2, 3);
    let config = TrainConfig {
        d_model: 32,
        d_ff: 64,
        heads: 4,
        epochs: 15,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let trained = fit(&train, &train[..32], &config, |r| println!("{}", r.log_line()))?;
    let tokens = train[0].tokens.clone();
    let preds = predict(&trained.model, &trained.vocabs, &[tokens.clone()], DecodeMode::TopK, true)?;
    let scope = preds[0].scope.as_ref().expect("full model has scope weights");

    print!("{:>12}", "");
    for t in &tokens {
        print!("{t:>9.8}");
    }
    println!();
    for (t, row) in tokens.iter().zip(scope) {
        print!("{t:>12.11}");
        for w in row {
            print!("{w:>9.3}");
        }
        println!();
    }
    println!("gold intents {:?}, predicted {:?}", train[0].intents, preds[0].intents);
    Ok(())
}
