use std::collections::HashMap;

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;
/// Stand-in precision for an order with no matched n-grams.
pub const BLEU_EPSILON: f64 = 1e-9;

/// Sufficient statistics of corpus BLEU.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct BleuStats {
    /// Clipped n-gram matches per order (index 0 is unigrams).
    pub matches: [usize; MAX_ORDER],
    /// Hypothesis n-grams per order.
    pub totals: [usize; MAX_ORDER],
    pub hyp_len: usize,
    /// Sum over sentences of the reference length closest to the hypothesis.
    pub ref_len: usize,
}

fn tokens(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn ngram_counts(toks: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut out = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Closest reference length; ties go to the shorter one.
fn closest_len(hyp: usize, refs: &[usize]) -> usize {
    refs.iter()
        .copied()
        .min_by_key(|&r| (r.abs_diff(hyp), r))
        .unwrap_or(0)
}

impl BleuStats {
    /// Adds one hypothesis scored against its references.
    pub fn add(&mut self, hyp: &str, refs: &[&str]) {
        let h = tokens(hyp);
        let rs: Vec<Vec<String>> = refs.iter().map(|r| tokens(r)).collect();
        self.hyp_len += h.len();
        self.ref_len += closest_len(h.len(), &rs.iter().map(Vec::len).collect::<Vec<_>>());
        for n in 1..=MAX_ORDER {
            let hc = ngram_counts(&h, n);
            let mut max_ref: HashMap<&[String], usize> = HashMap::new();
            for r in &rs {
                for (g, c) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(c);
                }
            }
            for (g, c) in &hc {
                self.matches[n - 1] += (*c).min(max_ref.get(g).copied().unwrap_or(0));
            }
            self.totals[n - 1] += h.len().saturating_sub(n - 1);
        }
    }

    /// Modified precision of order `n` (1-based).
    pub fn precision(&self, n: usize) -> f64 {
        let (m, t) = (self.matches[n - 1], self.totals[n - 1]);
        if m == 0 {
            BLEU_EPSILON
        } else {
            m as f64 / t as f64
        }
    }

    pub fn brevity_penalty(&self) -> f64 {
        if self.hyp_len == 0 {
            0.0
        } else if self.hyp_len > self.ref_len {
            1.0
        } else {
            (1.0 - self.ref_len as f64 / self.hyp_len as f64).exp()
        }
    }

    pub fn score(&self) -> f64 {
        let log_mean =
            (1..=MAX_ORDER).map(|n| self.precision(n).ln()).sum::<f64>() / MAX_ORDER as f64;
        self.brevity_penalty() * log_mean.exp()
    }
}

/// Case-insensitive corpus BLEU-4 in `[0, 1]`. `refs[i]` holds every
/// reference of hypothesis `i`.
pub fn bleu<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[Vec<R>]) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::NoHypotheses);
    }
    if hyps.len() != refs.len() {
        return Err(Error::shape(
            "bleu",
            format!("{} hypotheses vs {} reference sets", hyps.len(), refs.len()),
        ));
    }
    let mut stats = BleuStats::default();
    for (h, rs) in hyps.iter().zip(refs) {
        if rs.is_empty() {
            return Err(Error::shape("bleu", "hypothesis without a reference"));
        }
        let rs: Vec<&str> = rs.iter().map(AsRef::as_ref).collect();
        stats.add(h.as_ref(), &rs);
    }
    Ok(stats.score())
}

/// Single-reference convenience form.
pub fn bleu_single<H: AsRef<str>, R: AsRef<str>>(hyps: &[H], refs: &[R]) -> Result<f64> {
    let refs: Vec<Vec<&str>> = refs.iter().map(|r| vec![r.as_ref()]).collect();
    bleu(hyps, &refs)
}
