//! Corpus parsing, vocabularies, auxiliary labels and batching.

mod batch;
mod corpus;
pub mod synth;
mod vocab;

pub use batch::{
    bucket_batches, decode_row, derive_inp_label, derive_sct_labels, encode_batch, encode_tight,
    sequential_batches, Batch,
};
pub use corpus::{
    drop_long, format_corpus, is_bio_label, join_intents, parse_corpus, read_corpus, Utterance,
};
pub use vocab::{ChunkTag, Vocab, Vocabs, PAD, UNK};
