//! Binary checkpoint format.
//!
//! All integers are little-endian.
//!
//! ```text
//! magic          8 bytes   "SSRANCKP"
//! format         u32       FORMAT_VERSION
//! header         u32 len + UTF-8   key=value lines (artifact version,
//!                                  dimensions, layer counts, vocab sizes,
//!                                  dropout, ablations)
//! token vocab    u32 len + UTF-8   one entry per line, line number = id
//! slot vocab     u32 len + UTF-8
//! intent vocab   u32 len + UTF-8
//! param count    u32
//! per parameter  u32 len + UTF-8 name, u32 rank, rank × u64 dims,
//!                product(dims) × f64 values
//! crc32          u32       over every preceding byte
//! ```
//!
//! A parameter used in several places (the slot/intent classifier) is
//! stored once under its name and re-shared when the layout is rebuilt.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::data::Vocabs;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, Ssran};
use crate::nn::Tensor;

pub const MAGIC: &[u8; 8] = b"SSRANCKP";
pub const FORMAT_VERSION: u32 = 1;
pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn header(config: &ModelConfig) -> String {
    let c = config;
    [
        ("version", ARTIFACT_VERSION.to_string()),
        ("d_model", c.d_model.to_string()),
        ("d_ff", c.d_ff.to_string()),
        ("heads", c.heads.to_string()),
        ("encoder_layers", c.encoder_layers.to_string()),
        ("decoder_layers", c.decoder_layers.to_string()),
        ("ran_layers", c.ran_layers.to_string()),
        ("rel_clip", c.rel_clip.to_string()),
        ("dropout", c.dropout.to_string()),
        ("token_vocab", c.token_vocab.to_string()),
        ("num_slots", c.num_slots.to_string()),
        ("num_intents", c.num_intents.to_string()),
        ("ablations", c.ablations.name()),
    ]
    .iter()
    .map(|(k, v)| format!("{k}={v}\n"))
    .collect()
}

pub fn to_bytes(model: &Ssran, vocabs: &Vocabs) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, FORMAT_VERSION);
    put_str(&mut out, &header(model.config()));
    put_str(&mut out, &vocabs.tokens.to_lines());
    put_str(&mut out, &vocabs.slots.to_lines());
    put_str(&mut out, &vocabs.intents.to_lines());
    put_u32(&mut out, model.store().len() as u32);
    for (_, name, t) in model.store().iter() {
        put_str(&mut out, name);
        put_u32(&mut out, t.shape().len() as u32);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    put_u32(&mut out, crc);
    out
}

pub fn save(path: impl AsRef<Path>, model: &Ssran, vocabs: &Vocabs) -> Result<()> {
    fs::write(path, to_bytes(model, vocabs))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(corrupt(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn str(&mut self, what: &str) -> Result<&'a str> {
        let n = self.u32(what)? as usize;
        std::str::from_utf8(self.take(n, what)?).map_err(|_| corrupt(format!("{what} is not UTF-8")))
    }
}

fn parse_header(text: &str) -> Result<ModelConfig> {
    let map: BTreeMap<&str, &str> = text
        .lines()
        .filter_map(|l| l.split_once('='))
        .collect();
    let get = |k: &str| {
        map.get(k)
            .copied()
            .ok_or_else(|| corrupt(format!("header lacks {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| corrupt(format!("header field {k} is not a number")))
    };
    let config = ModelConfig {
        d_model: num("d_model")?,
        d_ff: num("d_ff")?,
        heads: num("heads")?,
        encoder_layers: num("encoder_layers")?,
        decoder_layers: num("decoder_layers")?,
        ran_layers: num("ran_layers")?,
        rel_clip: num("rel_clip")?,
        dropout: get("dropout")?
            .parse()
            .map_err(|_| corrupt("header field dropout is not a number"))?,
        token_vocab: num("token_vocab")?,
        num_slots: num("num_slots")?,
        num_intents: num("num_intents")?,
        ablations: get("ablations")?.parse()?,
    };
    config.validate().map_err(|e| corrupt(e.to_string()))?;
    Ok(config)
}

pub fn from_bytes(buf: &[u8]) -> Result<(Ssran, Vocabs)> {
    if buf.len() < MAGIC.len() + 8 || &buf[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let (body, tail) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(corrupt("checksum mismatch"));
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let format = r.u32("format version")?;
    if format != FORMAT_VERSION {
        return Err(corrupt(format!("unsupported format version {format}")));
    }
    let config = parse_header(r.str("header")?)?;
    let vocabs = Vocabs::from_text(r.str("token vocab")?, r.str("slot vocab")?, r.str("intent vocab")?)
        .map_err(|e| corrupt(e.to_string()))?;
    let sizes = (vocabs.tokens.len(), vocabs.slots.len(), vocabs.intents.len());
    if sizes != (config.token_vocab, config.num_slots, config.num_intents) {
        return Err(corrupt(format!(
            "header vocab sizes disagree with stored vocabularies {sizes:?}"
        )));
    }
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.str("parameter name")?.to_string();
        let rank = r.u32("rank")? as usize;
        if rank > 4 {
            return Err(corrupt(format!("{name}: rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("dimension")? as usize);
        }
        let len = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n <= (body.len() - r.pos) / 8)
            .ok_or_else(|| corrupt(format!("{name}: shape {shape:?} exceeds the file")))?;
        let raw = r.take(len * 8, "values")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))?;
        if !t.is_finite() {
            return Err(corrupt(format!("{name} holds non-finite values")));
        }
        params.push((name, t));
    }
    if r.pos != body.len() {
        return Err(corrupt("trailing bytes after parameters"));
    }
    Ok((Ssran::from_parts(config, params)?, vocabs))
}

pub fn load(path: impl AsRef<Path>) -> Result<(Ssran, Vocabs)> {
    from_bytes(&fs::read(path)?)
}

/// Header of a checkpoint file without loading its parameters.
pub fn read_header(buf: &[u8]) -> Result<String> {
    if buf.len() < MAGIC.len() + 8 || &buf[..MAGIC.len()] != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let mut r = Reader {
        buf,
        pos: MAGIC.len() + 4,
    };
    Ok(r.str("header")?.to_string())
}
