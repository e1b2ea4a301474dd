//! Whitespace tokenization, vocabularies with a reserved made-up id range,
//! parallel corpus loading and padded batching.

mod batch;
mod vocab;

pub use batch::{
    encode_corpus, encode_pair, make_batches, read_parallel, BatchStream, EncodedPair,
    ParallelBatch,
};
pub use vocab::{Vocabulary, BOS, DEFAULT_MADEUP, EOS, NUM_SPECIALS, PAD, UNK};
