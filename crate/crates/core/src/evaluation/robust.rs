use serde::{Deserialize, Serialize};

use super::bleu::bleu;
use super::decode::{decode_hypotheses, DecodeConfig};
use crate::corpus::{Vocabulary, UNK};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::rng::{stream_rng, Rng, Stream};
use crate::numerics::{Float, Tensor};
use crate::perturb::{apply_strategy, sample_word_positions, PerturbationSpec, Strategy};

pub const DEFAULT_RATES: [f64; 4] = [0.0, 0.05, 0.1, 0.2];
pub const DEFAULT_SEEDS: [u64; 3] = [1, 2, 3];

/// Encoded sources with their (possibly several) references.
#[derive(Clone, Debug, Default)]
pub struct TestSet {
    pub src: Vec<Vec<u32>>,
    pub refs: Vec<Vec<String>>,
}

impl TestSet {
    pub fn from_pairs<'a>(
        pairs: impl IntoIterator<Item = (&'a str, &'a str)>,
        src_vocab: &Vocabulary,
    ) -> Self {
        let mut out = TestSet::default();
        for (s, t) in pairs {
            out.src.push(src_vocab.encode(s));
            out.refs.push(vec![t.to_string()]);
        }
        out
    }

    pub fn len(&self) -> usize {
        self.src.len()
    }

    pub fn is_empty(&self) -> bool {
        self.src.is_empty()
    }
}

/// A model under evaluation and whether its NALs run.
#[derive(Clone, Copy)]
pub struct System<'a, T> {
    pub name: &'a str,
    pub model: &'a Model<T>,
    pub nal_active: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RobustnessConfig {
    pub strategy: Strategy,
    pub rates: Vec<f64>,
    pub seeds: Vec<u64>,
    pub m: usize,
    pub gaussian_std: f64,
    pub decode: DecodeConfig,
}

impl Default for RobustnessConfig {
    fn default() -> Self {
        RobustnessConfig {
            strategy: Strategy::Madeup,
            rates: DEFAULT_RATES.to_vec(),
            seeds: DEFAULT_SEEDS.to_vec(),
            m: crate::perturb::DEFAULT_NEIGHBORS,
            gaussian_std: crate::perturb::DEFAULT_GAUSSIAN_STD,
            decode: DecodeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRecord {
    pub rate: f64,
    pub system: String,
    pub seed: u64,
    pub bleu: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub rate: f64,
    pub system: String,
    pub mean: f64,
    pub sd: f64,
    /// `mean` minus the first system's mean at the same rate.
    pub delta: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub records: Vec<RobustnessRecord>,
}

fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = if xs.len() > 1 {
        xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

impl RobustnessReport {
    /// Rates and systems in first-seen order.
    fn axes(&self) -> (Vec<f64>, Vec<String>) {
        let mut rates: Vec<f64> = Vec::new();
        let mut systems: Vec<String> = Vec::new();
        for r in &self.records {
            if !rates.iter().any(|x| x.to_bits() == r.rate.to_bits()) {
                rates.push(r.rate);
            }
            if !systems.contains(&r.system) {
                systems.push(r.system.clone());
            }
        }
        (rates, systems)
    }

    pub fn scores(&self, rate: f64, system: &str) -> Vec<f64> {
        self.records
            .iter()
            .filter(|r| r.rate.to_bits() == rate.to_bits() && r.system == system)
            .map(|r| r.bleu)
            .collect()
    }

    /// Mean and sample standard deviation of BLEU per (rate, system), with
    /// the difference to the first system listed.
    pub fn summary(&self) -> Vec<SummaryRow> {
        let (rates, systems) = self.axes();
        let mut out = Vec::new();
        for &rate in &rates {
            let base = systems
                .first()
                .map(|s| mean_sd(&self.scores(rate, s)).0)
                .unwrap_or(0.0);
            for s in &systems {
                let (mean, sd) = mean_sd(&self.scores(rate, s));
                out.push(SummaryRow {
                    rate,
                    system: s.clone(),
                    mean,
                    sd,
                    delta: mean - base,
                });
            }
        }
        out
    }

    pub fn mean(&self, rate: f64, system: &str) -> Option<f64> {
        let xs = self.scores(rate, system);
        (!xs.is_empty()).then(|| mean_sd(&xs).0)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.records)?)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("rate\tsystem\tmean\tsd\n");
        for r in self.summary() {
            out.push_str(&format!(
                "{}\t{}\t{:.6}\t{:.6}\n",
                r.rate, r.system, r.mean, r.sd
            ));
        }
        out
    }
}

/// Perturbed sources plus per-sentence embedding overrides.
pub struct NoisySources<T> {
    pub src: Vec<Vec<u32>>,
    pub overrides: Vec<Vec<(usize, Vec<T>)>>,
}

/// Test-time noise. Made-up noise becomes `UNK`, the id an unseen surface
/// word gets; every other strategy is applied as in training against
/// `table`, the system's source embeddings.
pub fn perturb_sources<T: Float>(
    srcs: &[Vec<u32>],
    spec: &PerturbationSpec,
    vocab: &Vocabulary,
    table: &Tensor<T>,
    rng: &mut Rng,
) -> Result<NoisySources<T>> {
    let mut out = NoisySources {
        src: Vec::with_capacity(srcs.len()),
        overrides: Vec::with_capacity(srcs.len()),
    };
    for s in srcs {
        if spec.strategy == Strategy::Madeup {
            let mut ids = s.clone();
            for p in sample_word_positions(s, vocab, spec.rate, rng) {
                ids[p] = UNK;
            }
            out.src.push(ids);
            out.overrides.push(Vec::new());
        } else {
            let plan = apply_strategy(s, s.len(), &[s.len()], spec, vocab, table, rng)?;
            out.src.push(plan.apply_ids(s, s.len()));
            out.overrides.push(plan.overrides(s.len()));
        }
    }
    Ok(out)
}

fn check_vocab<T>(sys: &System<'_, T>, src: &Vocabulary, tgt: &Vocabulary) -> Result<()> {
    let c = &sys.model.config;
    if c.src_vocab != src.total_size() || c.tgt_vocab != tgt.total_size() {
        return Err(Error::VocabMismatch(format!(
            "system `{}` has {}/{} embedding rows, test vocabularies have {}/{}",
            sys.name,
            c.src_vocab,
            c.tgt_vocab,
            src.total_size(),
            tgt.total_size()
        )));
    }
    Ok(())
}

/// Decodes `test` and scores it against its references.
pub fn evaluate_bleu<T: Float>(
    sys: &System<'_, T>,
    src: &[Vec<u32>],
    overrides: &[Vec<(usize, Vec<T>)>],
    refs: &[Vec<String>],
    tgt_vocab: &Vocabulary,
    cfg: &DecodeConfig,
) -> Result<f64> {
    let hyps: Vec<String> = decode_hypotheses(sys.model, src, overrides, cfg, sys.nal_active)?
        .iter()
        .map(|h| tgt_vocab.decode(&h.tokens))
        .collect();
    bleu(&hyps, refs)
}

/// For each rate and seed, perturbs the test sources, decodes them with
/// every system and records BLEU. All systems see the same noise positions.
pub fn robustness_eval<T: Float>(
    systems: &[System<'_, T>],
    test: &TestSet,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    cfg: &RobustnessConfig,
) -> Result<RobustnessReport> {
    if test.is_empty() {
        return Err(Error::NoHypotheses);
    }
    for s in systems {
        check_vocab(s, src_vocab, tgt_vocab)?;
    }
    let mut records = Vec::new();
    let mut clean: Vec<Option<f64>> = vec![None; systems.len()];
    for &rate in &cfg.rates {
        let spec = PerturbationSpec {
            strategy: cfg.strategy,
            rate,
            m: cfg.m,
            gaussian_std: cfg.gaussian_std,
        };
        for &seed in &cfg.seeds {
            for (i, sys) in systems.iter().enumerate() {
                let bleu = if rate == 0.0 {
                    match clean[i] {
                        Some(b) => b,
                        None => *clean[i].insert(evaluate_bleu(
                            sys,
                            &test.src,
                            &[],
                            &test.refs,
                            tgt_vocab,
                            &cfg.decode,
                        )?),
                    }
                } else {
                    let mut rng = stream_rng(seed, Stream::TestNoise, rate.to_bits());
                    let table = sys.model.params.get(sys.model.layout.src_emb);
                    let noisy = perturb_sources(&test.src, &spec, src_vocab, table, &mut rng)?;
                    evaluate_bleu(
                        sys,
                        &noisy.src,
                        &noisy.overrides,
                        &test.refs,
                        tgt_vocab,
                        &cfg.decode,
                    )?
                };
                records.push(RobustnessRecord {
                    rate,
                    system: sys.name.to_string(),
                    seed,
                    bleu,
                });
            }
        }
    }
    Ok(RobustnessReport { records })
}
