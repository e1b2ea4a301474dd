//! Noisy-input generation.
//!
//! Source side: made-up word replacement, plus the comparison strategies
//! (semantic neighbors, zeroed embeddings, Gaussian noise, random real words).
//! Target side: each selected decoder-input word has its embedding replaced
//! by the mean of its `m` most cosine-similar target words.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{Float, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Madeup,
    Semantics,
    Dropout,
    Gaussian,
    Random,
    None,
}

impl Strategy {
    pub const ALL: [Strategy; 6] = [
        Strategy::Madeup,
        Strategy::Semantics,
        Strategy::Dropout,
        Strategy::Gaussian,
        Strategy::Random,
        Strategy::None,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Madeup => "madeup",
            Strategy::Semantics => "semantics",
            Strategy::Dropout => "dropout",
            Strategy::Gaussian => "gaussian",
            Strategy::Random => "random",
            Strategy::None => "none",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::UnknownStrategy(s.to_string()))
    }
}

pub const DEFAULT_RATE: f64 = 0.1;
pub const DEFAULT_NEIGHBORS: usize = 3;
pub const DEFAULT_GAUSSIAN_STD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerturbationSpec {
    pub strategy: Strategy,
    /// Per-token selection probability.
    pub rate: f64,
    /// Neighbor count for semantic perturbation.
    pub m: usize,
    pub gaussian_std: f64,
}

impl PerturbationSpec {
    pub fn new(strategy: Strategy, rate: f64) -> Self {
        PerturbationSpec {
            strategy,
            rate,
            m: DEFAULT_NEIGHBORS,
            gaussian_std: DEFAULT_GAUSSIAN_STD,
        }
    }

    pub fn none() -> Self {
        Self::new(Strategy::None, 0.0)
    }

    pub fn validate(&self, vocab: &Vocabulary) -> Result<()> {
        if !(0.0..=1.0).contains(&self.rate) {
            return Err(Error::Config(format!(
                "noise rate {} outside [0, 1]",
                self.rate
            )));
        }
        if self.m == 0 {
            return Err(Error::Config("neighbor count m must be at least 1".into()));
        }
        if self.gaussian_std <= 0.0 || !self.gaussian_std.is_finite() {
            return Err(Error::Config(format!(
                "gaussian_std {} must be positive",
                self.gaussian_std
            )));
        }
        let words = vocab.real_word_range().len();
        match self.strategy {
            Strategy::Madeup if vocab.madeup_size() == 0 => Err(Error::Config(
                "made-up strategy needs a non-empty made-up dictionary".into(),
            )),
            Strategy::Semantics if self.m >= words => Err(Error::Config(format!(
                "m = {} must be below the {words} real words",
                self.m
            ))),
            Strategy::Random if words == 0 => {
                Err(Error::Config("random strategy needs real words".into()))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Action<T> {
    /// Token id substituted into the sequence.
    Replace(u32),
    /// Embedding-table-space vector used in place of the token's row.
    Override(Vec<T>),
}

/// Per-sentence `(position, action)` lists.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationPlan<T> {
    pub sentences: Vec<Vec<(usize, Action<T>)>>,
}

impl<T: Float> PerturbationPlan<T> {
    pub fn empty(batch: usize) -> Self {
        PerturbationPlan {
            sentences: vec![Vec::new(); batch],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.sentences.iter().all(Vec::is_empty)
    }

    pub fn num_perturbed(&self) -> usize {
        self.sentences.iter().map(Vec::len).sum()
    }

    pub fn positions(&self, b: usize) -> Vec<usize> {
        self.sentences[b].iter().map(|(p, _)| *p).collect()
    }

    /// Row-major `batch × width` ids with replacements applied.
    pub fn apply_ids(&self, ids: &[u32], width: usize) -> Vec<u32> {
        let mut out = ids.to_vec();
        for (b, s) in self.sentences.iter().enumerate() {
            for (p, a) in s {
                if let Action::Replace(id) = a {
                    out[b * width + p] = *id;
                }
            }
        }
        out
    }

    /// Embedding overrides keyed by flat position in a `batch × width` layout.
    pub fn overrides(&self, width: usize) -> Vec<(usize, Vec<T>)> {
        let mut out = Vec::new();
        for (b, s) in self.sentences.iter().enumerate() {
            for (p, a) in s {
                if let Action::Override(v) = a {
                    out.push((b * width + p, v.clone()));
                }
            }
        }
        out
    }
}

/// Independent Bernoulli(`rate`) draw for each of `len` positions. One
/// uniform is consumed per position whatever the rate.
pub fn sample_positions<R: Rng + ?Sized>(len: usize, rate: f64, rng: &mut R) -> Vec<usize> {
    (0..len).filter(|_| rng.random::<f64>() < rate).collect()
}

/// Bernoulli selection restricted to real-word positions of one sentence.
pub fn sample_word_positions<R: Rng + ?Sized>(
    ids: &[u32],
    vocab: &Vocabulary,
    rate: f64,
    rng: &mut R,
) -> Vec<usize> {
    let eligible: Vec<usize> = (0..ids.len())
        .filter(|&p| vocab.is_real_word(ids[p]))
        .collect();
    sample_positions(eligible.len(), rate, rng)
        .into_iter()
        .map(|i| eligible[i])
        .collect()
}

/// Replaces each selected position with a uniformly drawn made-up id.
pub fn apply_madeup<R: Rng + ?Sized>(
    ids: &[u32],
    positions: &[usize],
    vocab: &Vocabulary,
    rng: &mut R,
) -> Result<Vec<u32>> {
    let range = vocab.madeup_range();
    if range.is_empty() {
        return Err(Error::Config(
            "made-up strategy needs a non-empty made-up dictionary".into(),
        ));
    }
    let mut out = ids.to_vec();
    for &p in positions {
        out[p] = rng.random_range(range.clone());
    }
    Ok(out)
}

fn dot_norm<T: Float>(a: &[T], b: &[T]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| x.to_f64_lossy() * y.to_f64_lossy())
        .sum()
}

/// The `m` candidate ids with the highest cosine similarity to row `query`,
/// best first, ties to the lower id. The query itself and zero-norm rows are
/// never returned.
pub fn top_m_neighbors<T: Float>(
    query: u32,
    table: &Tensor<T>,
    candidates: Range<u32>,
    m: usize,
) -> Result<Vec<u32>> {
    let q = table.row(query as usize);
    let qn = dot_norm(q, q).sqrt();
    if qn == 0.0 {
        log::warn!("query row {query} has zero norm; similarities collapse to 0");
    }
    let mut scored: Vec<(f64, u32)> = Vec::with_capacity(candidates.len());
    for j in candidates {
        if j == query {
            continue;
        }
        let r = table.row(j as usize);
        let rn = dot_norm(r, r).sqrt();
        if rn == 0.0 {
            log::warn!("row {j} has zero norm; excluded from neighbor candidates");
            continue;
        }
        let cos = if qn == 0.0 {
            0.0
        } else {
            dot_norm(q, r) / (qn * rn)
        };
        scored.push((cos, j));
    }
    if scored.len() < m {
        return Err(Error::NotEnoughCandidates {
            need: m,
            have: scored.len(),
        });
    }
    let by_score = |a: &(f64, u32), b: &(f64, u32)| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1));
    if m < scored.len() {
        scored.select_nth_unstable_by(m, by_score);
        scored.truncate(m);
    }
    scored.sort_by(by_score);
    Ok(scored.into_iter().map(|(_, j)| j).collect())
}

/// Mean of the top-`m` neighbor rows of `query`.
pub fn semantic_perturb_embedding<T: Float>(
    query: u32,
    table: &Tensor<T>,
    candidates: Range<u32>,
    m: usize,
) -> Result<Vec<T>> {
    let ids = top_m_neighbors(query, table, candidates, m)?;
    let mut mean = vec![T::zero(); table.cols()];
    for &j in &ids {
        for (o, &x) in mean.iter_mut().zip(table.row(j as usize)) {
            *o += x;
        }
    }
    let mf = T::from_usize(m).unwrap();
    mean.iter_mut().for_each(|x| *x /= mf);
    Ok(mean)
}

/// Builds a plan for a padded batch (`batch × width`, `lens` per row).
///
/// Only real-word positions are eligible. `table` is the embedding table the
/// ids index; override vectors live in its (unscaled) space.
pub fn apply_strategy<T: Float, R: Rng + ?Sized>(
    ids: &[u32],
    width: usize,
    lens: &[usize],
    spec: &PerturbationSpec,
    vocab: &Vocabulary,
    table: &Tensor<T>,
    rng: &mut R,
) -> Result<PerturbationPlan<T>> {
    if spec.strategy == Strategy::None {
        return Ok(PerturbationPlan::empty(lens.len()));
    }
    spec.validate(vocab)?;
    let normal = Normal::new(0.0, spec.gaussian_std).map_err(|e| Error::Config(e.to_string()))?;
    let mut sentences = Vec::with_capacity(lens.len());
    for (b, &len) in lens.iter().enumerate() {
        let row = &ids[b * width..][..len];
        let positions = sample_word_positions(row, vocab, spec.rate, rng);
        let mut acts = Vec::with_capacity(positions.len());
        for p in positions {
            let id = row[p];
            let act = match spec.strategy {
                Strategy::Madeup => Action::Replace(rng.random_range(vocab.madeup_range())),
                Strategy::Random => Action::Replace(rng.random_range(vocab.real_word_range())),
                Strategy::Dropout => Action::Override(vec![T::zero(); table.cols()]),
                Strategy::Gaussian => Action::Override(
                    table
                        .row(id as usize)
                        .iter()
                        .map(|&x| x + T::from_f64_lossy(normal.sample(rng)))
                        .collect(),
                ),
                Strategy::Semantics => Action::Override(semantic_perturb_embedding(
                    id,
                    table,
                    vocab.real_word_range(),
                    spec.m,
                )?),
                Strategy::None => unreachable!(),
            };
            acts.push((p, act));
        }
        sentences.push(acts);
    }
    Ok(PerturbationPlan { sentences })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{EncodedPair, ParallelBatch, BOS, EOS, NUM_SPECIALS};
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    /// The worked 4-word table: a=(1,0) b=(0.9,0.1) c=(0,1) d=(-1,0), placed
    /// after four special rows.
    fn four_word_table() -> Tensor<f64> {
        let mut data = vec![0.3, 0.7, 0.2, -0.4, 0.5, 0.5, -0.1, 0.9];
        data.extend([1.0, 0.0, 0.9, 0.1, 0.0, 1.0, -1.0, 0.0]);
        Tensor::new([8, 2], data).unwrap()
    }

    fn brute_force(query: u32, table: &Tensor<f64>, cands: Range<u32>, m: usize) -> Vec<u32> {
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
            d / (na * nb)
        };
        let mut all: Vec<(f64, u32)> = cands
            .filter(|&j| j != query)
            .map(|j| (cos(table.row(query as usize), table.row(j as usize)), j))
            .collect();
        all.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        all.into_iter().take(m).map(|x| x.1).collect()
    }

    #[test]
    fn strategy_names_parse() {
        for s in Strategy::ALL {
            assert_eq!(s.name().parse::<Strategy>().unwrap(), s);
        }
        assert!(matches!(
            "typo".parse::<Strategy>(),
            Err(Error::UnknownStrategy(_))
        ));
    }

    #[test]
    fn default_neighbor_count_and_rates() {
        assert_eq!(DEFAULT_NEIGHBORS, 3);
        assert_eq!(DEFAULT_RATE, 0.1);
    }

    #[test]
    fn rate_zero_and_one() {
        let mut r = rng(1);
        for len in 1..20 {
            assert!(sample_positions(len, 0.0, &mut r).is_empty());
            assert_eq!(
                sample_positions(len, 1.0, &mut r),
                (0..len).collect::<Vec<_>>()
            );
        }
    }

    #[test]
    fn selection_rate_within_binomial_interval() {
        let mut r = rng(2);
        let n = 100_000;
        let got = sample_positions(n, 0.1, &mut r).len() as f64 / n as f64;
        assert!((0.097..=0.103).contains(&got), "{got}");
    }

    #[test]
    fn madeup_replacements_stay_in_reserved_range() {
        let v = Vocabulary::from_words((0..20).map(|i| format!("w{i}")), 10);
        let ids: Vec<u32> = (4..24).collect();
        let mut r = rng(3);
        assert_eq!(apply_madeup(&ids, &[], &v, &mut r).unwrap(), ids);
        let positions: Vec<usize> = (0..20).step_by(3).collect();
        let out = apply_madeup(&ids, &positions, &v, &mut r).unwrap();
        for (p, (&o, &i)) in out.iter().zip(&ids).enumerate() {
            if positions.contains(&p) {
                assert!(v.is_madeup(o));
            } else {
                assert_eq!(o, i);
            }
        }
        let none = Vocabulary::from_words(["a".to_string()], 0);
        assert!(apply_madeup(&[4], &[0], &none, &mut r).is_err());
    }

    #[test]
    fn madeup_slots_are_uniform() {
        // frequency oracle: each of 10 slots within ±3 sd of 1000
        let v = Vocabulary::from_words(["a".to_string()], 10);
        let mut r = rng(4);
        let mut counts = [0usize; 10];
        for _ in 0..10_000 {
            let id = apply_madeup(&[4], &[0], &v, &mut r).unwrap()[0];
            counts[(id - 5) as usize] += 1;
        }
        let sd = (10_000.0f64 * 0.1 * 0.9).sqrt();
        for c in counts {
            assert!((c as f64 - 1000.0).abs() <= 3.0 * sd, "{counts:?}");
        }
    }

    #[test]
    fn two_candidates_give_the_other_word() {
        let t = Tensor::new([2, 2], vec![1.0, 2.0, 3.0, 1.0]).unwrap();
        assert_eq!(top_m_neighbors(0, &t, 0..2, 1).unwrap(), vec![1]);
    }

    #[test]
    fn worked_four_word_case() {
        let t = four_word_table();
        let cands = 4..8;
        let n = top_m_neighbors(4, &t, cands.clone(), 2).unwrap();
        assert_eq!(n, vec![5, 6]);
        assert_eq!(n, brute_force(4, &t, cands.clone(), 2));
        let e = semantic_perturb_embedding(4, &t, cands, 2).unwrap();
        assert!((e[0] - 0.45).abs() < 1e-12 && (e[1] - 0.55).abs() < 1e-12);
    }

    #[test]
    fn identical_neighbors_average_to_themselves() {
        let t = Tensor::new([4, 2], vec![1.0, 0.0, 0.2, 0.3, 0.2, 0.3, 0.2, 0.3]).unwrap();
        let e: Vec<f64> = semantic_perturb_embedding(0, &t, 0..4, 3).unwrap();
        assert!((e[0] - 0.2).abs() < 1e-12 && (e[1] - 0.3).abs() < 1e-12);
    }

    #[test]
    fn zero_norm_rows_are_skipped_and_shortfalls_error() {
        let t = Tensor::new([3, 2], vec![1.0, 0.0, 0.0, 0.0, 0.5, 0.5]).unwrap();
        assert_eq!(top_m_neighbors(0, &t, 0..3, 1).unwrap(), vec![2]);
        assert!(matches!(
            top_m_neighbors(0, &t, 0..3, 2),
            Err(Error::NotEnoughCandidates { need: 2, have: 1 })
        ));
    }

    #[test]
    fn ties_prefer_lower_ids() {
        let t = Tensor::new([4, 2], vec![1.0, 0.0, 2.0, 0.0, 3.0, 0.0, 1.0, 0.0]).unwrap();
        assert_eq!(top_m_neighbors(0, &t, 0..4, 2).unwrap(), vec![1, 2]);
    }

    fn batch_vocab() -> (Vocabulary, ParallelBatch) {
        let v = Vocabulary::from_words((0..30).map(|i| format!("w{i}")), 8);
        let pairs: Vec<EncodedPair> = (0..6)
            .map(|i| {
                let src: Vec<u32> = (0..3 + i).map(|k| 4 + ((i * 7 + k) % 30) as u32).collect();
                let mut tgt = vec![BOS];
                tgt.extend(src.iter().rev());
                tgt.push(EOS);
                EncodedPair { src, tgt }
            })
            .collect();
        (v, ParallelBatch::from_pairs(&pairs))
    }

    fn table(v: &Vocabulary, d: usize, seed: u64) -> Tensor<f32> {
        let mut r = rng(seed);
        Tensor::from_fn([v.total_size(), d], |_| r.random_range(-1.0..1.0))
    }

    #[test]
    fn dropout_overrides_are_zero_vectors() {
        let (v, b) = batch_vocab();
        let t = table(&v, 8, 5);
        let spec = PerturbationSpec::new(Strategy::Dropout, 0.5);
        let plan =
            apply_strategy(&b.src, b.src_max, &b.src_lens, &spec, &v, &t, &mut rng(6)).unwrap();
        assert!(!plan.is_empty());
        for (_, vec) in plan.overrides(b.src_max) {
            assert_eq!(vec.iter().map(|x| x * x).sum::<f32>(), 0.0);
        }
    }

    #[test]
    fn gaussian_noise_has_requested_spread() {
        let v = Vocabulary::from_words(["a".into(), "b".into()], 0);
        let d = 10_000;
        let mut r = rng(7);
        let t = Tensor::<f64>::from_fn([v.total_size(), d], |_| r.random_range(-1.0..1.0));
        let spec = PerturbationSpec {
            gaussian_std: 0.01,
            ..PerturbationSpec::new(Strategy::Gaussian, 1.0)
        };
        let plan = apply_strategy(&[4], 1, &[1], &spec, &v, &t, &mut rng(8)).unwrap();
        let Action::Override(vec) = &plan.sentences[0][0].1 else {
            panic!()
        };
        let diff: Vec<f64> = vec.iter().zip(t.row(4)).map(|(a, b)| a - b).collect();
        let mean = diff.iter().sum::<f64>() / d as f64;
        let sd = (diff.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (d - 1) as f64).sqrt();
        assert!((sd - 0.01).abs() < 0.01 * 0.05, "{sd}");
    }

    #[test]
    fn random_replacements_are_real_words() {
        let (v, b) = batch_vocab();
        let t = table(&v, 4, 9);
        let spec = PerturbationSpec::new(Strategy::Random, 1.0);
        let plan =
            apply_strategy(&b.src, b.src_max, &b.src_lens, &spec, &v, &t, &mut rng(10)).unwrap();
        for s in &plan.sentences {
            for (_, a) in s {
                let Action::Replace(id) = a else { panic!() };
                assert!((NUM_SPECIALS as u32..v.real_size() as u32).contains(id));
            }
        }
    }

    #[test]
    fn none_strategy_gives_empty_plan() {
        let (v, b) = batch_vocab();
        let t = table(&v, 4, 11);
        let plan = apply_strategy(
            &b.src,
            b.src_max,
            &b.src_lens,
            &PerturbationSpec::none(),
            &v,
            &t,
            &mut rng(1),
        )
        .unwrap();
        assert!(plan.is_empty());
        assert_eq!(plan.sentences.len(), b.size());
    }

    #[test]
    fn specials_and_padding_are_never_selected() {
        let (v, b) = batch_vocab();
        let t = table(&v, 4, 12);
        let dec = b.dec_input();
        let w = b.dec_len();
        let lens: Vec<usize> = b.tgt_lens.iter().map(|l| l - 1).collect();
        let spec = PerturbationSpec::new(Strategy::Semantics, 1.0);
        let plan = apply_strategy(&dec, w, &lens, &spec, &v, &t, &mut rng(13)).unwrap();
        for (bi, s) in plan.sentences.iter().enumerate() {
            for (p, _) in s {
                assert!(v.is_real_word(dec[bi * w + p]));
                assert!(*p > 0, "BOS selected");
            }
            assert_eq!(s.len(), lens[bi] - 1);
        }
    }

    proptest! {
        #[test]
        fn madeup_plans_are_seeded_and_touch_only_selected_slots(seed in 0u64..500, rate in 0.0f64..1.0) {
            let (v, b) = batch_vocab();
            let t = table(&v, 4, 14);
            let spec = PerturbationSpec::new(Strategy::Madeup, rate);
            let p1 = apply_strategy(&b.src, b.src_max, &b.src_lens, &spec, &v, &t, &mut rng(seed)).unwrap();
            let p2 = apply_strategy(&b.src, b.src_max, &b.src_lens, &spec, &v, &t, &mut rng(seed)).unwrap();
            prop_assert_eq!(&p1, &p2);
            let noisy = p1.apply_ids(&b.src, b.src_max);
            let changed = noisy.iter().zip(&b.src).filter(|(a, b)| a != b).count();
            prop_assert_eq!(changed, p1.num_perturbed());
            for s in &p1.sentences {
                for (_, a) in s {
                    let Action::Replace(id) = a else { panic!() };
                    prop_assert!(v.is_madeup(*id));
                }
            }
        }

        #[test]
        fn neighbors_match_brute_force(seed in 0u64..1000, rows in 6usize..120, d in 1usize..16, m in 1usize..4) {
            let mut r = rng(seed);
            let t = Tensor::<f64>::from_fn([rows, d], |_| r.random_range(-1.0..1.0));
            let q = r.random_range(0..rows as u32);
            prop_assert_eq!(top_m_neighbors(q, &t, 0..rows as u32, m).unwrap(), brute_force(q, &t, 0..rows as u32, m));
        }

        #[test]
        fn neighbors_are_scale_invariant(seed in 0u64..1000, scale in 0.01f64..100.0) {
            let mut r = rng(seed);
            let t = Tensor::<f64>::from_fn([30, 5], |_| r.random_range(-1.0..1.0));
            let ts = Tensor::new([30, 5], t.data().iter().map(|x| x * scale).collect()).unwrap();
            prop_assert_eq!(top_m_neighbors(3, &t, 0..30, 3).unwrap(), top_m_neighbors(3, &ts, 0..30, 3).unwrap());
        }
    }
}
