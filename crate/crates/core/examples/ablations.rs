//! Trains every ablation variant on the same synthetic split and prints
//! their best dev scores side by side.
//!
//! cargo run --release --example ablations [epochs]

use ssran::data::synth;
use ssran::model::Ablations;
use ssran::train::{fit, TrainConfig};

fn main() -> ssran::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let train = synth::generate(400, 1, 3, 11);
    let dev = synth::generate(100, 1, 3, 12);
    println!("{:<12} {:>8} {:>8} {:>8} {:>6}", "variant", "intent", "slot_f1", "overall", "epoch");
    for name in Ablations::NAMES {
        let config = TrainConfig {
            epochs,
            d_model: 32,
            d_ff: 64,
            heads: 4,
            batch_size: 16,
            ablation: name.parse()?,
            ..TrainConfig::default()
        };
        let trained = fit(&train, &dev, &config, |_| {})?;
        let best = trained.best();
        println!(
            "{name:<12} {:>8.3} {:>8.3} {:>8.3} {:>6}",
            best.dev.intent_accuracy, best.dev.slot_f1, best.dev.overall_accuracy, best.epoch
        );
    }
    Ok(())
}
