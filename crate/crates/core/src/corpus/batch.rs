use std::path::Path;

use rand::seq::SliceRandom;

use super::vocab::{Vocabulary, BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::numerics::rng::{stream_rng, Stream};

/// One sentence pair as ids. The target carries `BOS … EOS`, the source is
/// left unwrapped.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct EncodedPair {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
}

impl EncodedPair {
    pub fn tokens(&self) -> usize {
        self.src.len() + self.tgt.len()
    }
}

/// Encodes one pair. Returns [`Error::EmptySentence`] when either side has
/// no tokens; callers skip such pairs.
pub fn encode_pair(
    src: &str,
    tgt: &str,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Result<EncodedPair> {
    let s = src_vocab.encode(src);
    let t = tgt_vocab.encode(tgt);
    if s.is_empty() || t.is_empty() {
        return Err(Error::EmptySentence);
    }
    let mut tgt = Vec::with_capacity(t.len() + 2);
    tgt.push(BOS);
    tgt.extend(t);
    tgt.push(EOS);
    Ok(EncodedPair { src: s, tgt })
}

/// Encodes line-aligned sentences, skipping (and logging) empty pairs.
pub fn encode_corpus<'a, I>(
    pairs: I,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
) -> Vec<EncodedPair>
where
    I: IntoIterator<Item = (&'a str, &'a str)>,
{
    pairs
        .into_iter()
        .enumerate()
        .filter_map(
            |(i, (s, t))| match encode_pair(s, t, src_vocab, tgt_vocab) {
                Ok(p) => Some(p),
                Err(e) => {
                    log::warn!("skipping pair {i}: {e}");
                    None
                }
            },
        )
        .collect()
}

/// Reads two line-aligned UTF-8 files.
pub fn read_parallel(
    src: impl AsRef<Path>,
    tgt: impl AsRef<Path>,
) -> Result<(Vec<String>, Vec<String>)> {
    let s: Vec<String> = std::fs::read_to_string(src)?
        .lines()
        .map(str::to_string)
        .collect();
    let t: Vec<String> = std::fs::read_to_string(tgt)?
        .lines()
        .map(str::to_string)
        .collect();
    if s.len() != t.len() {
        return Err(Error::Config(format!(
            "parallel files differ in length: {} vs {} lines",
            s.len(),
            t.len()
        )));
    }
    Ok((s, t))
}

/// Padded batch, row-major `batch × max_len` on both sides.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelBatch {
    pub src: Vec<u32>,
    pub tgt: Vec<u32>,
    pub src_lens: Vec<usize>,
    pub tgt_lens: Vec<usize>,
    pub src_max: usize,
    pub tgt_max: usize,
}

impl ParallelBatch {
    pub fn from_pairs(pairs: &[EncodedPair]) -> Self {
        Self::from_pairs_padded(pairs, 0, 0)
    }

    /// Like [`ParallelBatch::from_pairs`] with at least `min_src` / `min_tgt`
    /// columns.
    pub fn from_pairs_padded(pairs: &[EncodedPair], min_src: usize, min_tgt: usize) -> Self {
        let src_max = pairs
            .iter()
            .map(|p| p.src.len())
            .max()
            .unwrap_or(0)
            .max(min_src);
        let tgt_max = pairs
            .iter()
            .map(|p| p.tgt.len())
            .max()
            .unwrap_or(0)
            .max(min_tgt);
        let mut src = vec![PAD; pairs.len() * src_max];
        let mut tgt = vec![PAD; pairs.len() * tgt_max];
        for (b, p) in pairs.iter().enumerate() {
            src[b * src_max..][..p.src.len()].copy_from_slice(&p.src);
            tgt[b * tgt_max..][..p.tgt.len()].copy_from_slice(&p.tgt);
        }
        ParallelBatch {
            src,
            tgt,
            src_lens: pairs.iter().map(|p| p.src.len()).collect(),
            tgt_lens: pairs.iter().map(|p| p.tgt.len()).collect(),
            src_max,
            tgt_max,
        }
    }

    pub fn size(&self) -> usize {
        self.src_lens.len()
    }

    /// Padded token count of both sides.
    pub fn padded_tokens(&self) -> usize {
        self.size() * (self.src_max + self.tgt_max)
    }

    pub fn src_mask(&self) -> Vec<bool> {
        mask(&self.src_lens, self.src_max)
    }

    pub fn tgt_mask(&self) -> Vec<bool> {
        mask(&self.tgt_lens, self.tgt_max)
    }

    /// Width of decoder inputs and labels, `tgt_max - 1`.
    pub fn dec_len(&self) -> usize {
        self.tgt_max.saturating_sub(1)
    }

    /// Decoder inputs: each target without its last column (`BOS y_1 … y_n`).
    pub fn dec_input(&self) -> Vec<u32> {
        let l = self.dec_len();
        (0..self.size())
            .flat_map(|b| {
                let row = &self.tgt[b * self.tgt_max..][..self.tgt_max];
                row[..l].iter().map(|&t| if t == EOS { PAD } else { t })
            })
            .collect()
    }

    /// Labels: each target shifted left (`y_1 … y_n EOS`).
    pub fn dec_labels(&self) -> Vec<u32> {
        let l = self.dec_len();
        (0..self.size())
            .flat_map(|b| self.tgt[b * self.tgt_max + 1..][..l].iter().copied())
            .collect()
    }

    /// 1 on decoder positions that feed the loss.
    pub fn dec_mask(&self) -> Vec<bool> {
        mask(
            &self
                .tgt_lens
                .iter()
                .map(|l| l.saturating_sub(1))
                .collect::<Vec<_>>(),
            self.dec_len(),
        )
    }

    pub fn pair(&self, b: usize) -> EncodedPair {
        EncodedPair {
            src: self.src[b * self.src_max..][..self.src_lens[b]].to_vec(),
            tgt: self.tgt[b * self.tgt_max..][..self.tgt_lens[b]].to_vec(),
        }
    }

    pub fn pairs(&self) -> Vec<EncodedPair> {
        (0..self.size()).map(|b| self.pair(b)).collect()
    }
}

fn mask(lens: &[usize], max: usize) -> Vec<bool> {
    lens.iter()
        .flat_map(|&l| (0..max).map(move |i| i < l))
        .collect()
}

/// Length-bucketed, seeded batching over one epoch.
///
/// Pairs are shuffled, stably sorted by length, packed greedily so every
/// batch stays within `batch_tokens` padded tokens, and the batch order is
/// shuffled again.
pub fn make_batches(
    pairs: &[EncodedPair],
    batch_tokens: usize,
    seed: u64,
    epoch: u64,
) -> Result<Vec<ParallelBatch>> {
    if let Some((index, p)) = pairs
        .iter()
        .enumerate()
        .find(|(_, p)| p.tokens() > batch_tokens)
    {
        return Err(Error::PairTooLong {
            index,
            tokens: p.tokens(),
            budget: batch_tokens,
        });
    }
    let mut rng = stream_rng(seed, Stream::Batching, epoch);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| (pairs[i].src.len(), pairs[i].tgt.len()));

    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut cur: Vec<usize> = Vec::new();
    let (mut smax, mut tmax) = (0usize, 0usize);
    for i in order {
        let (s, t) = (pairs[i].src.len().max(smax), pairs[i].tgt.len().max(tmax));
        if !cur.is_empty() && (cur.len() + 1).saturating_mul(s + t) > batch_tokens {
            groups.push(std::mem::take(&mut cur));
            smax = 0;
            tmax = 0;
        }
        smax = smax.max(pairs[i].src.len());
        tmax = tmax.max(pairs[i].tgt.len());
        cur.push(i);
    }
    if !cur.is_empty() {
        groups.push(cur);
    }
    groups.shuffle(&mut rng);
    Ok(groups
        .into_iter()
        .map(|g| {
            let ps: Vec<EncodedPair> = g.into_iter().map(|i| pairs[i].clone()).collect();
            ParallelBatch::from_pairs(&ps)
        })
        .collect())
}

/// Endless batch iterator cycling through seeded epochs.
pub struct BatchStream {
    pairs: Vec<EncodedPair>,
    batch_tokens: usize,
    seed: u64,
    epoch: u64,
    pending: std::vec::IntoIter<ParallelBatch>,
}

impl BatchStream {
    pub fn new(pairs: Vec<EncodedPair>, batch_tokens: usize, seed: u64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let first = make_batches(&pairs, batch_tokens, seed, 0)?;
        Ok(BatchStream {
            pairs,
            batch_tokens,
            seed,
            epoch: 0,
            pending: first.into_iter(),
        })
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }
}

impl Iterator for BatchStream {
    type Item = ParallelBatch;

    fn next(&mut self) -> Option<ParallelBatch> {
        if let Some(b) = self.pending.next() {
            return Some(b);
        }
        self.epoch += 1;
        // budget was validated in `new`
        let batches = make_batches(&self.pairs, self.batch_tokens, self.seed, self.epoch).ok()?;
        self.pending = batches.into_iter();
        self.pending.next()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::vocab::UNK;
    use proptest::prelude::*;

    fn vocab() -> Vocabulary {
        Vocabulary::build(["a a b"], 10, 2).unwrap()
    }

    #[test]
    fn source_is_bare_and_target_is_wrapped() {
        let v = vocab();
        let p = encode_pair("b", "a", &v, &v).unwrap();
        assert_eq!(p.src, vec![v.id("b")]);
        assert_eq!(p.tgt, vec![BOS, v.id("a"), EOS]);
        assert_eq!(v.decode(&p.tgt), "a");
    }

    #[test]
    fn unseen_tokens_become_unk() {
        let v = vocab();
        let p = encode_pair("x y z", "a", &v, &v).unwrap();
        assert_eq!(p.src, vec![UNK, UNK, UNK]);
    }

    #[test]
    fn empty_sentences_are_flagged_and_skipped() {
        let v = vocab();
        assert!(matches!(
            encode_pair(" ", "a", &v, &v),
            Err(Error::EmptySentence)
        ));
        let enc = encode_corpus([("a", "b"), ("", "b"), ("b", "a")], &v, &v);
        assert_eq!(enc.len(), 2);
    }

    #[test]
    fn batch_layout_masks_and_shifts() {
        let v = vocab();
        let pairs = vec![
            encode_pair("a b a", "a", &v, &v).unwrap(),
            encode_pair("b", "b a", &v, &v).unwrap(),
        ];
        let b = ParallelBatch::from_pairs(&pairs);
        assert_eq!(b.src_max, 3);
        assert_eq!(b.tgt_max, 4);
        assert_eq!(b.src_mask(), vec![true, true, true, true, false, false]);
        let (a, bb) = (v.id("a"), v.id("b"));
        assert_eq!(b.tgt, vec![BOS, a, EOS, PAD, BOS, bb, a, EOS]);
        assert_eq!(b.dec_input(), vec![BOS, a, PAD, BOS, bb, a]);
        assert_eq!(b.dec_labels(), vec![a, EOS, PAD, bb, a, EOS]);
        assert_eq!(b.dec_mask(), vec![true, true, false, true, true, true]);
        assert_eq!(b.pairs(), pairs);
    }

    fn toy_pairs(n: usize) -> Vec<EncodedPair> {
        (0..n)
            .map(|i| EncodedPair {
                src: (0..1 + i % 7).map(|k| 4 + ((i + k) % 5) as u32).collect(),
                tgt: std::iter::once(BOS)
                    .chain((0..1 + i % 4).map(|k| 4 + (k as u32)))
                    .chain(std::iter::once(EOS))
                    .collect(),
            })
            .collect()
    }

    #[test]
    fn same_seed_gives_same_batches() {
        let pairs = toy_pairs(60);
        assert_eq!(
            make_batches(&pairs, 64, 3, 0).unwrap(),
            make_batches(&pairs, 64, 3, 0).unwrap()
        );
        assert_ne!(
            make_batches(&pairs, 64, 3, 0).unwrap(),
            make_batches(&pairs, 64, 4, 0).unwrap()
        );
    }

    #[test]
    fn unbounded_budget_gives_one_batch() {
        let pairs = toy_pairs(40);
        let b = make_batches(&pairs, usize::MAX, 1, 0).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].size(), 40);
    }

    #[test]
    fn oversized_pair_is_rejected_with_index() {
        let mut pairs = toy_pairs(5);
        pairs[3].src = vec![4; 50];
        assert!(matches!(
            make_batches(&pairs, 20, 0, 0),
            Err(Error::PairTooLong { index: 3, .. })
        ));
    }

    #[test]
    fn batch_stream_cycles_epochs() {
        let pairs = toy_pairs(10);
        let mut s = BatchStream::new(pairs, usize::MAX, 0).unwrap();
        s.next().unwrap();
        assert_eq!(s.epoch(), 0);
        s.next().unwrap();
        assert_eq!(s.epoch(), 1);
    }

    proptest! {
        // multiset oracle: sorted concatenation equals sorted input
        #[test]
        fn batches_partition_the_input(seed in 0u64..1000, budget in 16usize..200, epoch in 0u64..3) {
            let pairs = toy_pairs(100);
            let batches = make_batches(&pairs, budget, seed, epoch).unwrap();
            let mut got: Vec<EncodedPair> = batches.iter().flat_map(|b| b.pairs()).collect();
            let mut want = pairs.clone();
            got.sort();
            want.sort();
            prop_assert_eq!(got, want);
            for b in &batches {
                prop_assert!(b.padded_tokens() <= budget);
            }
        }
    }
}
