//! Compares reverse-mode gradients of the full training loss with central
//! differences on a small model.
//!
//! cargo run --release --example gradient_check

use std::time::Instant;

use ssran::data::{encode_tight, synth, Utterance, Vocabs};
use ssran::model::{ModelConfig, Ssran};
use ssran::nn::grad_check;
use ssran::train::Losses;

fn main() -> ssran::Result<()> {
    let data = synth::generate(2, 1, 1, 9);
    let vocabs = Vocabs::build(&data)?;
    let refs: Vec<&Utterance> = data.iter().collect();
    let batch = encode_tight(&refs, &vocabs)?;
    let config = ModelConfig {
        d_model: 8,
        d_ff: 16,
        heads: 2,
        rel_clip: 4,
        ..ModelConfig::new(vocabs.tokens.len(), vocabs.slots.len(), vocabs.intents.len())
    };
    let model = Ssran::new(config, 1)?;
    let mut store = model.store().clone();
    let start = Instant::now();
    let report = grad_check(&mut store, 1e-5, |g| {
        let f = model.forward(g, &batch.token_ids, &batch.mask)?;
        Ok(Losses::build(g, &f, &batch, 0.65, 0.3)?.total)
    })?;
    println!(
        "{} coordinates in {:.1}s, max relative error {:.3e}",
        report.coordinates,
        start.elapsed().as_secs_f64(),
        report.max_rel_error
    );
    if let Some((name, i)) = &report.worst {
        println!(
            "worst: {name}[{i}] analytic {:.6e} numeric {:.6e}",
            report.analytic_at_worst, report.numeric_at_worst
        );
    }
    Ok(())
}
