//! Toy parallel corpora: copy, bijective lexicon with reversal, and the
//! same lexicon under an adjacent-swap reordering.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::corpus::Vocabulary;
use crate::numerics::rng::{stream_rng, Rng, Stream};

pub const DEFAULT_WORDS: usize = 50;
pub const MIN_LEN: usize = 5;
pub const MAX_LEN: usize = 15;

/// Sentence pairs plus the vocabularies they were drawn from.
#[derive(Clone, Debug)]
pub struct SynthCorpus {
    pub pairs: Vec<(String, String)>,
    pub src_words: Vec<String>,
    pub tgt_words: Vec<String>,
}

impl SynthCorpus {
    pub fn src_vocab(&self, madeup: usize) -> Vocabulary {
        Vocabulary::from_words(self.src_words.iter().cloned(), madeup)
    }

    pub fn tgt_vocab(&self) -> Vocabulary {
        Vocabulary::from_words(self.tgt_words.iter().cloned(), 0)
    }

    /// First `n` pairs and the rest.
    pub fn split(mut self, n: usize) -> (SynthCorpus, SynthCorpus) {
        let rest = self.pairs.split_off(n.min(self.pairs.len()));
        let tail = SynthCorpus {
            pairs: rest,
            src_words: self.src_words.clone(),
            tgt_words: self.tgt_words.clone(),
        };
        (self, tail)
    }
}

fn words(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

fn sentence(rng: &mut Rng, vocab: usize) -> Vec<usize> {
    let len = rng.random_range(MIN_LEN..=MAX_LEN);
    (0..len).map(|_| rng.random_range(0..vocab)).collect()
}

fn join(ids: impl IntoIterator<Item = usize>, table: &[String]) -> String {
    ids.into_iter()
        .map(|i| table[i].as_str())
        .collect::<Vec<_>>()
        .join(" ")
}

/// Target is the source verbatim; both sides share `vocab` words.
pub fn copy_task(pairs: usize, vocab: usize, seed: u64) -> SynthCorpus {
    let table = words("w", vocab);
    let mut rng = stream_rng(seed, Stream::Batching, 1000);
    let pairs = (0..pairs)
        .map(|_| {
            let s = join(sentence(&mut rng, vocab), &table);
            (s.clone(), s)
        })
        .collect();
    SynthCorpus {
        pairs,
        src_words: table.clone(),
        tgt_words: table,
    }
}

/// Reordering applied after word-by-word translation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Reorder {
    Reverse,
    /// Swap positions (0,1), (2,3), ...; an odd last word stays.
    SwapAdjacent,
}

impl Reorder {
    pub fn apply<X>(self, xs: &mut [X]) {
        match self {
            Reorder::Reverse => xs.reverse(),
            Reorder::SwapAdjacent => xs.chunks_exact_mut(2).for_each(|c| c.swap(0, 1)),
        }
    }
}

/// A random bijection from `s0..` source words to `t0..` target words.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    pub map: Vec<usize>,
}

impl Lexicon {
    pub fn random(size: usize, seed: u64) -> Self {
        let mut map: Vec<usize> = (0..size).collect();
        map.shuffle(&mut stream_rng(seed, Stream::Batching, 1001));
        Lexicon { map }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// `pairs` sentences translated word by word, then reordered. `stream`
    /// picks an independent sentence sample for the same lexicon.
    pub fn corpus(&self, pairs: usize, reorder: Reorder, seed: u64, stream: u64) -> SynthCorpus {
        let (src_table, tgt_table) = (words("s", self.len()), words("t", self.len()));
        let mut rng = stream_rng(seed, Stream::Batching, 2000 + stream);
        let pairs = (0..pairs)
            .map(|_| {
                let src = sentence(&mut rng, self.len());
                let mut tgt: Vec<usize> = src.iter().map(|&w| self.map[w]).collect();
                reorder.apply(&mut tgt);
                (join(src, &src_table), join(tgt, &tgt_table))
            })
            .collect();
        SynthCorpus {
            pairs,
            src_words: src_table,
            tgt_words: tgt_table,
        }
    }
}
