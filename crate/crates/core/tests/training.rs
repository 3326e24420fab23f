use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use ssran::data::{encode_tight, synth, Utterance, Vocabs};
use ssran::model::{Ablations, ModelConfig, Ssran};
use ssran::train::{train_step, Adam, Losses};

fn tiny(vocabs: &Vocabs, ablations: Ablations) -> ModelConfig {
    ModelConfig {
        d_model: 8,
        d_ff: 16,
        heads: 2,
        rel_clip: 4,
        ablations,
        ..ModelConfig::new(vocabs.tokens.len(), vocabs.slots.len(), vocabs.intents.len())
    }
}

fn loss_of(model: &Ssran, utts: &[&Utterance], vocabs: &Vocabs) -> f64 {
    let batch = encode_tight(utts, vocabs).unwrap();
    let mut g = model.eval_graph();
    let f = model.forward_batch(&mut g, &batch).unwrap();
    Losses::build(&mut g, &f, &batch, 0.65, 0.3).unwrap().values(&g)[0]
}

#[test]
fn one_small_step_lowers_the_loss() {
    let data = synth::generate(200, 1, 3, 12);
    let vocabs = Vocabs::build(&data).unwrap();
    let mut lowered = 0;
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let utts: Vec<&Utterance> = data.choose_multiple(&mut rng, 4).collect();
        let batch = encode_tight(&utts, &vocabs).unwrap();
        let mut model = Ssran::new(tiny(&vocabs, Ablations::default()), seed).unwrap();
        let before = loss_of(&model, &utts, &vocabs);
        let mut adam = Adam::new(model.store(), 1e-4);
        train_step(&mut model, &mut adam, &batch, 0.65, 0.3, 5.0, None).unwrap();
        if loss_of(&model, &utts, &vocabs) < before {
            lowered += 1;
        }
    }
    assert!(lowered >= 95, "loss fell in only {lowered} of 100 steps");
}

#[test]
fn every_parameter_receives_gradient() {
    let data = synth::generate(20, 2, 3, 13);
    let vocabs = Vocabs::build(&data).unwrap();
    let refs: Vec<&Utterance> = data.iter().collect();
    let batch = encode_tight(&refs, &vocabs).unwrap();
    for name in Ablations::NAMES {
        let model = Ssran::new(tiny(&vocabs, name.parse().unwrap()), 2).unwrap();
        let mut g = model.eval_graph();
        let f = model.forward_batch(&mut g, &batch).unwrap();
        let total = Losses::build(&mut g, &f, &batch, 0.65, 0.3).unwrap().total;
        let grads = g.backward(total).unwrap();
        for (id, pname, _) in model.store().iter() {
            let grad = grads.get(id).unwrap_or_else(|| panic!("{name}: {pname} has no gradient"));
            assert!(grad.data().iter().any(|v| *v != 0.0), "{name}: {pname} gradient is zero");
        }
    }
}

#[test]
fn training_outputs_do_not_depend_on_padding() {
    let data = synth::generate(12, 1, 3, 14);
    let vocabs = Vocabs::build(&data).unwrap();
    let model = Ssran::new(tiny(&vocabs, Ablations::default()), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for u in &data {
        let alone = encode_tight(&[u], &vocabs).unwrap();
        let partner = &data[rng.gen_range(0..data.len())];
        let padded = ssran::data::encode_batch(&[u, partner], &vocabs, u.len().max(partner.len()) + 2).unwrap();
        let a = model.predict_batch(&alone).unwrap();
        let b = model.predict_batch(&padded).unwrap();
        for j in 0..u.len() {
            let d: f64 = a
                .slot_logits
                .row(j)
                .iter()
                .zip(b.slot_logits.row(j))
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(d < 1e-9, "row {j} moved by {d}");
        }
    }
}
