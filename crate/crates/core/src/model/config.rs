use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which components of the full model are removed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ablations {
    /// Scope mixing is the identity.
    pub no_sr: bool,
    /// The result-semantic vector is zero.
    pub no_ran: bool,
    /// Auxiliary losses are excluded (heads are still built and evaluable).
    pub no_aux: bool,
    /// Plain six-layer encoder: no preliminary heads, scope mixing, result
    /// attention or merge.
    pub basic_model: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 5] = ["none", "no_sr", "no_ran", "no_aux", "basic_model"];

    pub fn is_none(&self) -> bool {
        *self == Ablations::default()
    }

    pub fn uses_scope(&self) -> bool {
        !self.no_sr && !self.basic_model
    }

    pub fn uses_ran(&self) -> bool {
        !self.no_ran && !self.basic_model
    }

    pub fn name(&self) -> String {
        let mut parts = Vec::new();
        if self.no_sr {
            parts.push("no_sr");
        }
        if self.no_ran {
            parts.push("no_ran");
        }
        if self.no_aux {
            parts.push("no_aux");
        }
        if self.basic_model {
            parts.push("basic_model");
        }
        if parts.is_empty() {
            "none".into()
        } else {
            parts.join("+")
        }
    }
}

impl fmt::Display for Ablations {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl From<Ablations> for String {
    fn from(a: Ablations) -> String {
        a.name()
    }
}

impl TryFrom<String> for Ablations {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl FromStr for Ablations {
    type Err = Error;

    /// Accepts `none` or `+`-joined flag names.
    fn from_str(s: &str) -> Result<Self> {
        let mut a = Ablations::default();
        for part in s.split('+') {
            match part.trim() {
                "none" | "" => {}
                "no_sr" => a.no_sr = true,
                "no_ran" => a.no_ran = true,
                "no_aux" => a.no_aux = true,
                "basic_model" => a.basic_model = true,
                other => return Err(Error::Config(format!("unknown ablation {other:?}"))),
            }
        }
        Ok(a)
    }
}

/// Architecture hyperparameters and vocabulary sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ran_layers: usize,
    pub rel_clip: usize,
    pub dropout: f64,
    pub token_vocab: usize,
    pub num_slots: usize,
    pub num_intents: usize,
    pub ablations: Ablations,
}

impl ModelConfig {
    /// Published sizes with the given vocabulary sizes.
    pub fn new(token_vocab: usize, num_slots: usize, num_intents: usize) -> Self {
        ModelConfig {
            d_model: 128,
            d_ff: 512,
            heads: 8,
            encoder_layers: 2,
            decoder_layers: 4,
            ran_layers: 3,
            rel_clip: 16,
            dropout: 0.1,
            token_vocab,
            num_slots,
            num_intents,
            ablations: Ablations::default(),
        }
    }

    /// Intent-count classes, one per intent.
    pub fn num_counts(&self) -> usize {
        self.num_intents
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.d_model < 2 || self.d_ff == 0 {
            return Err(Error::Config("model dimensions too small".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.token_vocab < 3 || self.num_slots == 0 || self.num_intents == 0 {
            return Err(Error::Config("empty vocabulary".into()));
        }
        Ok(())
    }
}
