use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{Model, Pass};
use crate::numerics::{Float, Graph, Tensor};

/// Sentences encoded together.
pub const DECODE_BATCH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Greedy,
    Beam,
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "greedy" => Ok(Method::Greedy),
            "beam" => Ok(Method::Beam),
            _ => Err(Error::Config(format!("unknown decoding method `{s}`"))),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Greedy => "greedy",
            Method::Beam => "beam",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub method: Method,
    pub beam: usize,
    /// Output cap is `max_len_factor · |src| + max_len_offset` tokens, EOS included.
    pub max_len_factor: f64,
    pub max_len_offset: usize,
    /// GNMT length-penalty exponent.
    pub alpha: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            method: Method::Beam,
            beam: 4,
            max_len_factor: 2.0,
            max_len_offset: 10,
            alpha: 0.6,
        }
    }
}

impl DecodeConfig {
    pub fn greedy() -> Self {
        DecodeConfig {
            method: Method::Greedy,
            beam: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam == 0 {
            return Err(Error::Config("beam size must be at least 1".into()));
        }
        if !(self.max_len_factor >= 0.0 && self.max_len_factor.is_finite()) {
            return Err(Error::Config(format!(
                "max_len_factor {} must be finite and >= 0",
                self.max_len_factor
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!(
                "length penalty {} must be finite and >= 0",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Effective beam width; greedy is width 1.
    pub fn width(&self) -> usize {
        match self.method {
            Method::Greedy => 1,
            Method::Beam => self.beam,
        }
    }

    pub fn max_len(&self, src_len: usize) -> usize {
        (self.max_len_factor * src_len as f64).ceil() as usize + self.max_len_offset
    }

    /// `((5 + len) / 6)^α`.
    pub fn length_penalty(&self, len: usize) -> f64 {
        ((5.0 + len as f64) / 6.0).powf(self.alpha)
    }
}

/// A finished (or length-capped) output: tokens without BOS/EOS, the summed
/// log-probability of every emitted token including EOS, and the count of
/// emitted tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    pub tokens: Vec<u32>,
    pub log_prob: f64,
    pub steps: usize,
}

impl Hypothesis {
    pub fn normalized(&self, cfg: &DecodeConfig) -> f64 {
        self.log_prob / cfg.length_penalty(self.steps)
    }
}

/// Encoder states of a padded source batch, reused across decoder steps.
struct Encoded<T> {
    states: Tensor<T>,
    width: usize,
    mask: Vec<bool>,
    lens: Vec<usize>,
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
    row.iter().map(|&x| x - lse).collect()
}

fn encode_sources<T: Float>(
    model: &Model<T>,
    srcs: &[&[u32]],
    overrides: &[&[(usize, Vec<T>)]],
    nal: bool,
) -> Result<Encoded<T>> {
    let width = srcs.iter().map(|s| s.len()).max().unwrap_or(0);
    let mut ids = vec![PAD; srcs.len() * width];
    let mut mask = vec![false; srcs.len() * width];
    let mut flat = Vec::new();
    for (b, s) in srcs.iter().enumerate() {
        ids[b * width..][..s.len()].copy_from_slice(s);
        mask[b * width..][..s.len()].fill(true);
        for (p, v) in overrides.get(b).copied().unwrap_or(&[]) {
            if *p >= s.len() {
                return Err(Error::shape(
                    "decode",
                    format!("override at {p} past source length {}", s.len()),
                ));
            }
            flat.push((b * width + p, v.clone()));
        }
    }
    if width == 0 {
        return Ok(Encoded {
            states: Tensor::zeros([0, model.config.d_model]),
            width,
            mask,
            lens: vec![0; srcs.len()],
        });
    }
    let mut g = Graph::new();
    let out = model.net().encode(
        &mut g,
        &ids,
        srcs.len(),
        width,
        &mask,
        &flat,
        &Pass::infer(nal),
    )?;
    let states = g.value(out.states.expect("full encoder pass")).clone();
    Ok(Encoded {
        states,
        width,
        mask,
        lens: srcs.iter().map(|s| s.len()).collect(),
    })
}

/// Next-token log-probabilities for equal-length prefixes, each attached to
/// source `src[r]` of `enc`.
fn step_log_probs<T: Float>(
    model: &Model<T>,
    enc: &Encoded<T>,
    src: &[usize],
    prefixes: &[&[u32]],
    nal: bool,
) -> Result<Vec<Vec<f64>>> {
    let rows = prefixes.len();
    let t = prefixes[0].len();
    let d = model.config.d_model;
    let s = enc.width;
    let mut states = Vec::with_capacity(rows * s * d);
    let mut mask = Vec::with_capacity(rows * s);
    let mut ids = Vec::with_capacity(rows * t);
    for (r, &b) in src.iter().enumerate() {
        states.extend_from_slice(&enc.states.data()[b * s * d..][..s * d]);
        mask.extend_from_slice(&enc.mask[b * s..][..s]);
        ids.extend_from_slice(prefixes[r]);
    }
    let mut g = Graph::new();
    let encv = g.constant(Tensor::new([rows * s, d], states)?);
    let out = model.net().decode(
        &mut g,
        &ids,
        rows,
        t,
        &vec![true; rows * t],
        encv,
        s,
        &mask,
        &[],
        &Pass::infer(nal),
    )?;
    let logits = g.value(out.logits.expect("full decoder pass"));
    Ok((0..rows)
        .map(|r| {
            let row: Vec<f64> = logits
                .row(r * t + t - 1)
                .iter()
                .map(|x| x.to_f64_lossy())
                .collect();
            log_softmax(&row)
        })
        .collect())
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

fn greedy_batch<T: Float>(
    model: &Model<T>,
    enc: &Encoded<T>,
    cfg: &DecodeConfig,
    nal: bool,
) -> Result<Vec<Hypothesis>> {
    let n = enc.lens.len();
    let caps: Vec<usize> = enc.lens.iter().map(|&l| cfg.max_len(l)).collect();
    let mut seqs: Vec<Vec<u32>> = vec![vec![BOS]; n];
    let mut hyps: Vec<Hypothesis> = vec![
        Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            steps: 0,
        };
        n
    ];
    let mut alive: Vec<usize> = (0..n).filter(|&b| enc.lens[b] > 0 && caps[b] > 0).collect();
    while !alive.is_empty() {
        let prefixes: Vec<&[u32]> = alive.iter().map(|&b| seqs[b].as_slice()).collect();
        let lp = step_log_probs(model, enc, &alive, &prefixes, nal)?;
        let mut next = Vec::with_capacity(alive.len());
        for (r, &b) in alive.iter().enumerate() {
            let tok = argmax(&lp[r]) as u32;
            let h = &mut hyps[b];
            h.log_prob += lp[r][tok as usize];
            h.steps += 1;
            seqs[b].push(tok);
            if tok == EOS {
                continue;
            }
            h.tokens.push(tok);
            if h.steps < caps[b] {
                next.push(b);
            }
        }
        alive = next;
    }
    Ok(hyps)
}

fn beam_one<T: Float>(
    model: &Model<T>,
    enc: &Encoded<T>,
    b: usize,
    cfg: &DecodeConfig,
    nal: bool,
) -> Result<Hypothesis> {
    let k = cfg.width();
    let cap = cfg.max_len(enc.lens[b]);
    let mut alive: Vec<(Vec<u32>, f64)> = vec![(vec![BOS], 0.0)];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut steps = 0;
    while !alive.is_empty() && steps < cap {
        steps += 1;
        let prefixes: Vec<&[u32]> = alive.iter().map(|(s, _)| s.as_slice()).collect();
        let lp = step_log_probs(model, enc, &vec![b; alive.len()], &prefixes, nal)?;
        let mut cands: Vec<(usize, u32, f64)> = Vec::with_capacity(alive.len() * k);
        for (r, row) in lp.iter().enumerate() {
            let mut order: Vec<usize> = (0..row.len()).collect();
            order.sort_by(|&x, &y| row[y].total_cmp(&row[x]).then(x.cmp(&y)));
            for &tok in order.iter().take(k) {
                cands.push((r, tok as u32, alive[r].1 + row[tok]));
            }
        }
        cands.sort_by(|x, y| y.2.total_cmp(&x.2).then((x.0, x.1).cmp(&(y.0, y.1))));
        let mut next = Vec::with_capacity(k);
        for (r, tok, score) in cands.into_iter().take(k) {
            let mut seq = alive[r].0.clone();
            seq.push(tok);
            if tok == EOS || steps == cap {
                let tokens = seq[1..].iter().copied().filter(|&t| t != EOS).collect();
                finished.push(Hypothesis {
                    tokens,
                    log_prob: score,
                    steps,
                });
            } else {
                next.push((seq, score));
            }
        }
        alive = next;
    }
    Ok(finished
        .into_iter()
        .max_by(|x, y| x.normalized(cfg).total_cmp(&y.normalized(cfg)))
        .unwrap_or(Hypothesis {
            tokens: Vec::new(),
            log_prob: 0.0,
            steps: 0,
        }))
}

/// Decodes every source, `DECODE_BATCH` sentences at a time. `overrides[i]`
/// (if given) lists embedding overrides for positions of source `i`.
///
/// Beam search returns the greedy output instead whenever that scores
/// higher after length normalization.
pub fn decode_hypotheses<T: Float>(
    model: &Model<T>,
    srcs: &[Vec<u32>],
    overrides: &[Vec<(usize, Vec<T>)>],
    cfg: &DecodeConfig,
    nal_active: bool,
) -> Result<Vec<Hypothesis>> {
    cfg.validate()?;
    if srcs.iter().any(Vec::is_empty) {
        log::warn!("empty source sentence; its output is empty");
    }
    let mut out = Vec::with_capacity(srcs.len());
    for (c, chunk) in srcs.chunks(DECODE_BATCH).enumerate() {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let ovr: Vec<&[(usize, Vec<T>)]> = (0..chunk.len())
            .map(|i| {
                overrides
                    .get(c * DECODE_BATCH + i)
                    .map_or(&[][..], Vec::as_slice)
            })
            .collect();
        let enc = encode_sources(model, &refs, &ovr, nal_active)?;
        let greedy = greedy_batch(model, &enc, cfg, nal_active)?;
        if cfg.width() == 1 {
            out.extend(greedy);
            continue;
        }
        for (b, g) in greedy.into_iter().enumerate() {
            if enc.lens[b] == 0 {
                out.push(g);
                continue;
            }
            let beam = beam_one(model, &enc, b, cfg, nal_active)?;
            out.push(if g.normalized(cfg) > beam.normalized(cfg) {
                g
            } else {
                beam
            });
        }
    }
    Ok(out)
}

pub fn decode_all<T: Float>(
    model: &Model<T>,
    srcs: &[Vec<u32>],
    cfg: &DecodeConfig,
    nal_active: bool,
) -> Result<Vec<Vec<u32>>> {
    Ok(decode_hypotheses(model, srcs, &[], cfg, nal_active)?
        .into_iter()
        .map(|h| h.tokens)
        .collect())
}

/// Output tokens for one source sentence, without BOS/EOS.
pub fn decode<T: Float>(
    model: &Model<T>,
    src: &[u32],
    cfg: &DecodeConfig,
    nal_active: bool,
) -> Result<Vec<u32>> {
    Ok(decode_all(model, &[src.to_vec()], cfg, nal_active)?.remove(0))
}

/// Teacher-forced log-probability of `tokens` followed by EOS.
pub fn sequence_log_prob<T: Float>(
    model: &Model<T>,
    src: &[u32],
    tokens: &[u32],
    nal_active: bool,
) -> Result<f64> {
    if src.is_empty() {
        return Err(Error::EmptySentence);
    }
    let enc = encode_sources(model, &[src], &[], nal_active)?;
    let mut prefix = vec![BOS];
    prefix.extend_from_slice(tokens);
    let mut g = Graph::new();
    let encv = g.constant(enc.states.clone());
    let t = prefix.len();
    let out = model.net().decode(
        &mut g,
        &prefix,
        1,
        t,
        &vec![true; t],
        encv,
        enc.width,
        &enc.mask,
        &[],
        &Pass::infer(nal_active),
    )?;
    let logits = g.value(out.logits.expect("full decoder pass"));
    let mut total = 0.0;
    for (i, &next) in tokens.iter().chain(std::iter::once(&EOS)).enumerate() {
        let row: Vec<f64> = logits.row(i).iter().map(|x| x.to_f64_lossy()).collect();
        total += log_softmax(&row)[next as usize];
    }
    Ok(total)
}
