//! Overfits the full model on a 64-utterance synthetic slice and reports the
//! epoch at which training overall accuracy reached 95%.
//!
//! cargo run --release --example overfit [seed]

use std::time::Instant;

use ssran::data::synth;
use ssran::train::{fit, TrainConfig};

fn main() -> ssran::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1);
    let data = synth::generate(64, 2, 2, seed);
    let config = TrainConfig {
        seed,
        target_train_overall: Some(0.95),
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let trained = fit(&data, &data, &config, |r| {
        println!(
            "{}  train overall {:.3}  ({:.0}s)",
            r.log_line(),
            r.train_overall.unwrap_or(f64::NAN),
            start.elapsed().as_secs_f64()
        );
    })?;
    let last = trained.history.last().expect("at least one epoch");
    println!(
        "stopped after {} epochs in {:.1}s; best dev epoch {}",
        last.epoch,
        start.elapsed().as_secs_f64(),
        trained.best_epoch
    );
    Ok(())
}
