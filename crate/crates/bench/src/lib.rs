//! Shared fixtures for the criterion benchmarks.

use probelab::synth::{self, GrammarConfig};
use probelab::tokenizer::{train_bpe, BpeOptions, Vocab};

pub const SEED: u64 = 7;

/// A 200-document grammar corpus and a 500-merge-target vocabulary over it.
pub fn corpus_and_vocab() -> (String, Vocab) {
    let corpus = synth::corpus(200, SEED, &GrammarConfig::default());
    let vocab = train_bpe(&corpus, 500, &BpeOptions::default()).expect("vocab trains on the grammar corpus");
    (corpus, vocab)
}
