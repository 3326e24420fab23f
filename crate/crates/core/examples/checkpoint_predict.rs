//! Trains a small model, writes it to a checkpoint, loads it back and tags
//! raw sentences with both decoding modes.
//!
//! cargo run --release --example checkpoint_predict

use ssran::checkpoint;
use ssran::data::synth;
use ssran::infer::{format_predictions, parse_raw, predict, DecodeMode};
use ssran::train::{fit, TrainConfig};

fn main() -> ssran::Result<()> {
    let train = synth::generate(200, 1, 3, 21);
    let config = TrainConfig {
        d_model: 32,
        d_ff: 64,
        heads: 4,
        epochs: 20,
        batch_size: 16,
        ..TrainConfig::default()
    };
    let trained = fit(&train, &train[..40], &config, |_| {})?;
    let path = std::env::temp_dir().join("ssran_example.ckpt");
    checkpoint::save(&path, &trained.model, &trained.vocabs)?;
    let header = checkpoint::read_header(&std::fs::read(&path)?)?;
    println!("saved {} ({} parameters)\n{header}", path.display(), trained.model.store().num_values());

    let (model, vocabs) = checkpoint::load(&path)?;
    let sentences = parse_raw(&format!(
        "{}\n{}\n",
        train[0].tokens.join(" "),
        train[1].tokens.join(" ")
    ));
    for mode in [DecodeMode::TopK, DecodeMode::Threshold(0.5)] {
        println!("-- {mode}");
        print!("{}", format_predictions(&predict(&model, &vocabs, &sentences, mode, false)?));
    }
    std::fs::remove_file(&path)?;
    Ok(())
}
