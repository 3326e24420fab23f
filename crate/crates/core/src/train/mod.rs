//! Losses, the optimizer, and the epoch loop with dev-set model selection.

mod adam;
mod loss;

use std::fmt::Write as _;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{clip_global_norm, Adam};
pub use loss::{loss_id, loss_inp, loss_sct, loss_sf, loss_slu, loss_total, Losses};

use crate::data::{bucket_batches, drop_long, encode_tight, Batch, Utterance, Vocabs};
use crate::error::{Error, Result};
use crate::infer::{evaluate, DecodeMode, MetricReport};
use crate::model::{Ablations, ModelConfig, Ssran};

/// Optimization and architecture settings of a training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub alpha: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub dropout: f64,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ran_layers: usize,
    pub rel_clip: usize,
    pub max_len: usize,
    pub clip_norm: f64,
    pub ablation: Ablations,
    /// Stop once the training-set overall accuracy reaches this value.
    pub target_train_overall: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 32,
            alpha: 0.65,
            lambda: 0.3,
            epochs: 300,
            seed: 1,
            d_model: 128,
            d_ff: 512,
            heads: 8,
            dropout: 0.1,
            encoder_layers: 2,
            decoder_layers: 4,
            ran_layers: 3,
            rel_clip: 16,
            max_len: 64,
            clip_norm: 5.0,
            ablation: Ablations::default(),
            target_train_overall: None,
        }
    }
}

impl TrainConfig {
    /// λ after the `no_aux` ablation is applied. A zero λ marks the model
    /// itself as `no_aux`.
    pub fn effective_lambda(&self) -> f64 {
        if self.ablation.no_aux {
            0.0
        } else {
            self.lambda
        }
    }

    pub fn model_config(&self, vocabs: &Vocabs) -> ModelConfig {
        ModelConfig {
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            encoder_layers: self.encoder_layers,
            decoder_layers: self.decoder_layers,
            ran_layers: self.ran_layers,
            rel_clip: self.rel_clip,
            dropout: self.dropout,
            token_vocab: vocabs.tokens.len(),
            num_slots: vocabs.slots.len(),
            num_intents: vocabs.intents.len(),
            ablations: Ablations {
                no_aux: self.effective_lambda() == 0.0,
                ..self.ablation
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if !(0.0..=1.0).contains(&self.alpha) {
            return bad(format!("alpha {} outside [0, 1]", self.alpha));
        }
        if !(self.lambda >= 0.0) {
            return bad(format!("lambda {} is negative", self.lambda));
        }
        if !(self.lr > 0.0) || self.batch_size == 0 || self.max_len == 0 {
            return bad("lr, batch_size and max_len must be positive".into());
        }
        if !(self.clip_norm > 0.0) {
            return bad(format!("clip_norm {} must be positive", self.clip_norm));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Mean losses and dev scores of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub loss_sf: f64,
    pub loss_id: f64,
    pub loss_inp: f64,
    pub loss_sct: f64,
    pub dev: MetricReport,
    pub train_overall: Option<f64>,
}

impl EpochRecord {
    pub fn log_line(&self) -> String {
        format!(
            "epoch {:>3}  L {:.4}  sf {:.4}  id {:.4}  inp {:.4}  sct {:.4}  \
             dev intent {:.4}  slot_f1 {:.4}  overall {:.4}",
            self.epoch,
            self.loss,
            self.loss_sf,
            self.loss_id,
            self.loss_inp,
            self.loss_sct,
            self.dev.intent_accuracy,
            self.dev.slot_f1,
            self.dev.overall_accuracy
        )
    }
}

pub const HISTORY_HEADER: &str = "epoch\tloss\tloss_sf\tloss_id\tloss_inp\tloss_sct\t\
dev_intent_acc\tdev_slot_f1\tdev_overall_acc\ttrain_overall_acc";

/// Tab-separated history, one row per epoch. Values use the shortest
/// representation that round-trips, missing values are `-`.
pub fn format_history(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let train = r
            .train_overall
            .map_or_else(|| "-".to_string(), |v| v.to_string());
        let _ = writeln!(
            out,
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            r.epoch,
            r.loss,
            r.loss_sf,
            r.loss_id,
            r.loss_inp,
            r.loss_sct,
            r.dev.intent_accuracy,
            r.dev.slot_f1,
            r.dev.overall_accuracy,
            train
        );
    }
    out
}

/// Result of [`fit`].
#[derive(Clone, Debug)]
pub struct Trained {
    /// Parameters of the best dev epoch.
    pub model: Ssran,
    pub vocabs: Vocabs,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    /// Training utterances dropped for exceeding `max_len`.
    pub dropped: usize,
}

impl Trained {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// One optimizer step on `batch`; returns `[total, sf, id, inp, sct]`
/// before the update. `dropout_seed` of `None` disables dropout.
pub fn train_step(
    model: &mut Ssran,
    adam: &mut Adam,
    batch: &Batch,
    alpha: f64,
    lambda: f64,
    clip_norm: f64,
    dropout_seed: Option<u64>,
) -> Result<[f64; 5]> {
    let (values, mut grads) = {
        let mut g = match dropout_seed {
            Some(seed) => model.train_graph(seed),
            None => model.eval_graph(),
        };
        let f = model.forward_batch(&mut g, batch)?;
        let losses = Losses::build(&mut g, &f, batch, alpha, lambda)?;
        let values = losses.values(&g);
        if !values[0].is_finite() {
            return Err(Error::NonFinite(format!("loss {}", values[0])));
        }
        (values, g.backward(losses.total)?)
    };
    clip_global_norm(&mut grads, clip_norm);
    adam.step(model.store_mut(), &grads);
    Ok(values)
}

/// Trains on `train`, selecting the epoch with the best dev overall
/// accuracy. `on_epoch` sees each record as it is produced.
pub fn fit(
    train: &[Utterance],
    dev: &[Utterance],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<Trained> {
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(Error::Config("training and dev splits must be non-empty".into()));
    }
    let (train, dropped) = drop_long(train.to_vec(), config.max_len);
    if train.is_empty() {
        return Err(Error::Config(format!(
            "every training utterance is longer than {}",
            config.max_len
        )));
    }
    let vocabs = Vocabs::build(&train)?;
    let mut seeds = ChaCha8Rng::seed_from_u64(config.seed);
    let mut model = Ssran::new(config.model_config(&vocabs), seeds.next_u64())?;
    let mode = DecodeMode::default_for(&model);
    let mut adam = Adam::new(model.store(), config.lr);
    let lambda = config.effective_lambda();
    let lengths: Vec<usize> = train.iter().map(Utterance::len).collect();

    let mut history = Vec::new();
    let mut best: Option<(usize, f64, crate::nn::ParamStore)> = None;
    for epoch in 1..=config.epochs {
        let order = bucket_batches(&lengths, config.batch_size, seeds.next_u64());
        let mut sums = [0.0; 5];
        for (b, idx) in order.iter().enumerate() {
            let group: Vec<&Utterance> = idx.iter().map(|&i| &train[i]).collect();
            let batch = encode_tight(&group, &vocabs)?;
            let dropout_seed = Some(seeds.next_u64());
            let values = train_step(
                &mut model,
                &mut adam,
                &batch,
                config.alpha,
                lambda,
                config.clip_norm,
                dropout_seed,
            )
            .map_err(|e| match e {
                Error::NonFinite(_) => Error::Divergence {
                    epoch,
                    batch: b,
                    loss: f64::NAN,
                },
                other => other,
            })?;
            for (s, v) in sums.iter_mut().zip(values) {
                *s += v;
            }
        }
        let nb = order.len() as f64;
        let (dev_report, _) = evaluate(&model, &vocabs, dev, mode)?;
        let train_overall = match config.target_train_overall {
            Some(_) => Some(evaluate(&model, &vocabs, &train, mode)?.0.overall_accuracy),
            None => None,
        };
        let record = EpochRecord {
            epoch,
            loss: sums[0] / nb,
            loss_sf: sums[1] / nb,
            loss_id: sums[2] / nb,
            loss_inp: sums[3] / nb,
            loss_sct: sums[4] / nb,
            dev: dev_report,
            train_overall,
        };
        log::info!("{}", record.log_line());
        on_epoch(&record);
        let score = record.dev.overall_accuracy;
        if best.as_ref().map_or(true, |(_, s, _)| score > *s) {
            best = Some((epoch, score, model.store().clone()));
        }
        history.push(record);
        if let (Some(target), Some(reached)) = (config.target_train_overall, train_overall) {
            if reached >= target {
                break;
            }
        }
    }

    let best_epoch = match best {
        Some((epoch, _, store)) => {
            *model.store_mut() = store;
            epoch
        }
        None => return Err(Error::Config("epochs must be at least 1".into())),
    };
    Ok(Trained {
        model,
        vocabs,
        history,
        best_epoch,
        dropped,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth;

    fn tiny() -> TrainConfig {
        TrainConfig {
            d_model: 8,
            d_ff: 16,
            heads: 2,
            epochs: 2,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn defaults_match_published_setup() {
        let c = TrainConfig::default();
        assert_eq!((c.lr, c.batch_size, c.alpha, c.lambda), (1e-3, 32, 0.65, 0.3));
        assert_eq!((c.d_model, c.d_ff, c.heads, c.dropout), (128, 512, 8, 0.1));
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = TrainConfig {
            ablation: "no_sr".parse().unwrap(),
            target_train_overall: Some(0.9),
            ..tiny()
        };
        assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
        let partial = TrainConfig::from_toml("epochs = 7\nablation = \"basic_model\"\n").unwrap();
        assert_eq!(partial.epochs, 7);
        assert!(partial.ablation.basic_model);
        assert_eq!(partial.lr, 1e-3);
        assert!(TrainConfig::from_toml("epoch = 7").is_err());
    }

    #[test]
    fn fit_records_history_and_is_deterministic() {
        let data = synth::generate(12, 1, 2, 5);
        let run = || {
            let mut seen = 0;
            let t = fit(&data[..8], &data[8..], &tiny(), |_| seen += 1).unwrap();
            assert_eq!(seen, 2);
            t
        };
        let a = run();
        let b = run();
        assert_eq!(a.history.len(), 2);
        assert_eq!(format_history(&a.history), format_history(&b.history));
        assert!(a.best_epoch >= 1 && a.best_epoch <= 2);
        let text = format_history(&a.history);
        assert_eq!(text.lines().count(), 3);
        assert!(text.starts_with("epoch\tloss"));
    }

    #[test]
    fn empty_splits_are_rejected() {
        let data = synth::generate(4, 1, 1, 1);
        assert!(fit(&data, &[], &tiny(), |_| {}).is_err());
        assert!(fit(&[], &data, &tiny(), |_| {}).is_err());
    }

    #[test]
    fn no_aux_zeroes_lambda() {
        let c = TrainConfig {
            ablation: "no_aux".parse().unwrap(),
            ..tiny()
        };
        assert_eq!(c.effective_lambda(), 0.0);
        assert_eq!(tiny().effective_lambda(), 0.3);
    }
}
