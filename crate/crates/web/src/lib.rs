//! In-browser demo over a toy word-by-word translation task: perturb a
//! sentence, list embedding neighbours, and train a small CER model while
//! watching its three losses.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use cer::corpus::{encode_corpus, BatchStream, Vocabulary};
use cer::evaluation::{decode, DecodeConfig};
use cer::model::{Model, ModelConfig};
use cer::numerics::rng::{stream_rng, Stream};
use cer::numerics::AdamConfig;
use cer::perturb::{apply_strategy, top_m_neighbors, Action, PerturbationSpec, Strategy};
use cer::synth::{Lexicon, Reorder};
use cer::training::{NoiseConfig, Trainer, Variant, VariantConfig};

const WORDS: usize = 16;
const MADEUP: usize = 64;
const PAIRS: usize = 2000;
const BATCH_TOKENS: usize = 256;

#[derive(Debug, Serialize, PartialEq)]
pub struct TokenView {
    pub before: String,
    pub after: String,
    pub changed: bool,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct Neighbor {
    pub word: String,
    pub cosine: f64,
}

#[derive(Debug, Serialize, PartialEq)]
pub struct LossPoint {
    pub step: u64,
    pub l_nmt: f64,
    pub l_nal_x: f64,
    pub l_nal_y: f64,
}

/// Demo state without any JS types, so it runs natively too.
pub struct Core {
    lexicon: Lexicon,
    trainer: Trainer<f32>,
    batches: BatchStream,
    seed: u64,
}

impl Core {
    pub fn new(seed: u64) -> cer::Result<Self> {
        let lexicon = Lexicon::random(WORDS, seed);
        let corpus = lexicon.corpus(PAIRS, Reorder::Reverse, seed, 0);
        let sv = corpus.src_vocab(MADEUP);
        let tv = corpus.tgt_vocab();
        let pairs = encode_corpus(
            corpus.pairs.iter().map(|(a, b)| (a.as_str(), b.as_str())),
            &sv,
            &tv,
        );
        let mut cfg = ModelConfig {
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            layers: 1,
            dropout: 0.1,
            src_vocab: sv.total_size(),
            tgt_vocab: tv.total_size(),
            lambda_x: 0.1,
            lambda_y: 0.1,
            ..ModelConfig::default()
        };
        Variant::Cer.configure(&mut cfg);
        let model = Model::new(cfg, sv.real_size(), seed)?;
        let optim = AdamConfig {
            warmup_steps: 50,
            peak_lr: Some(3e-3),
            ..AdamConfig::default()
        };
        let trainer = Trainer::new(
            model,
            VariantConfig::new(Variant::Cer),
            NoiseConfig::default(),
            optim,
            sv,
            tv,
            seed,
        )?;
        Ok(Core {
            lexicon,
            trainer,
            batches: BatchStream::new(pairs, BATCH_TOKENS, seed)?,
            seed,
        })
    }

    fn src_vocab(&self) -> &Vocabulary {
        &self.trainer.src_vocab
    }

    /// A fresh source sentence from the task distribution.
    pub fn sample(&self, index: u64) -> String {
        let c = self
            .lexicon
            .corpus(1, Reorder::Reverse, self.seed, 100 + index);
        c.pairs[0].0.clone()
    }

    /// The reference translation of a source sentence.
    pub fn reference(&self, sentence: &str) -> String {
        let mut out: Vec<String> = sentence
            .split_whitespace()
            .map(
                |w| match w.strip_prefix('s').and_then(|n| n.parse::<usize>().ok()) {
                    Some(i) if i < self.lexicon.len() => format!("t{}", self.lexicon.map[i]),
                    _ => "<unk>".to_string(),
                },
            )
            .collect();
        Reorder::Reverse.apply(&mut out);
        out.join(" ")
    }

    pub fn train(&mut self, steps: u32) -> cer::Result<Vec<LossPoint>> {
        let mut out = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let batch = self.batches.next().expect("endless stream");
            let (b, _) = self.trainer.train_step(&batch)?;
            out.push(LossPoint {
                step: self.trainer.steps_taken(),
                l_nmt: b.l_nmt,
                l_nal_x: b.l_nal_x,
                l_nal_y: b.l_nal_y,
            });
        }
        Ok(out)
    }

    /// Training-time noise on one sentence. Made-up ids show as `<m:k>`,
    /// embedding overrides as `~word`.
    pub fn perturb(
        &self,
        sentence: &str,
        strategy: Strategy,
        rate: f64,
        seed: u64,
    ) -> cer::Result<Vec<TokenView>> {
        let vocab = self.src_vocab();
        let ids = vocab.encode(sentence);
        let spec = PerturbationSpec::new(strategy, rate);
        let table = self
            .trainer
            .model
            .params
            .get(self.trainer.model.layout.src_emb);
        let mut rng = stream_rng(seed, Stream::TestNoise, 0);
        let plan = apply_strategy(&ids, ids.len(), &[ids.len()], &spec, vocab, table, &mut rng)?;
        let mut out: Vec<TokenView> = ids
            .iter()
            .map(|&id| TokenView {
                before: vocab.token(id),
                after: vocab.token(id),
                changed: false,
            })
            .collect();
        for (p, act) in &plan.sentences[0] {
            let t = &mut out[*p];
            t.changed = true;
            t.after = match act {
                Action::Replace(id) if vocab.is_madeup(*id) => {
                    format!("<m:{}>", id - vocab.real_size() as u32)
                }
                Action::Replace(id) => vocab.token(*id),
                Action::Override(_) => format!("~{}", t.before),
            };
        }
        Ok(out)
    }

    /// Nearest source words to `word` by cosine over the current embeddings.
    pub fn neighbors(&self, word: &str, m: usize) -> cer::Result<Vec<Neighbor>> {
        let vocab = self.src_vocab();
        if !vocab.contains(word) {
            return Err(cer::Error::Config(format!("`{word}` is not a source word")));
        }
        let table = self
            .trainer
            .model
            .params
            .get(self.trainer.model.layout.src_emb);
        let q = vocab.id(word);
        let ids = top_m_neighbors(q, table, vocab.real_word_range(), m)?;
        let norm = |r: &[f32]| r.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
        let qr = table.row(q as usize);
        Ok(ids
            .into_iter()
            .map(|j| {
                let r = table.row(j as usize);
                let dot: f64 = qr.iter().zip(r).map(|(&a, &b)| a as f64 * b as f64).sum();
                Neighbor {
                    word: vocab.token(j),
                    cosine: dot / (norm(qr) * norm(r)),
                }
            })
            .collect())
    }

    pub fn translate(&self, sentence: &str, nal: bool) -> cer::Result<String> {
        let src = self.src_vocab().encode(sentence);
        let out = decode(&self.trainer.model, &src, &DecodeConfig::greedy(), nal)?;
        Ok(self.trainer.tgt_vocab.decode(&out))
    }
}

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

fn json<T: Serialize>(v: &T) -> Result<String, JsError> {
    serde_json::to_string(v).map_err(js_err)
}

#[wasm_bindgen]
pub struct Demo {
    core: Core,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32) -> Result<Demo, JsError> {
        Ok(Demo {
            core: Core::new(seed as u64).map_err(js_err)?,
        })
    }

    pub fn sample(&self, index: u32) -> String {
        self.core.sample(index as u64)
    }

    pub fn reference(&self, sentence: &str) -> String {
        self.core.reference(sentence)
    }

    /// JSON array of `{step, l_nmt, l_nal_x, l_nal_y}`.
    pub fn train(&mut self, steps: u32) -> Result<String, JsError> {
        json(&self.core.train(steps).map_err(js_err)?)
    }

    /// JSON array of `{before, after, changed}`.
    pub fn perturb(
        &self,
        sentence: &str,
        strategy: &str,
        rate: f64,
        seed: u32,
    ) -> Result<String, JsError> {
        let strategy: Strategy = strategy.parse().map_err(js_err)?;
        json(
            &self
                .core
                .perturb(sentence, strategy, rate, seed as u64)
                .map_err(js_err)?,
        )
    }

    /// JSON array of `{word, cosine}`.
    pub fn neighbors(&self, word: &str, m: u32) -> Result<String, JsError> {
        json(&self.core.neighbors(word, m as usize).map_err(js_err)?)
    }

    pub fn translate(&self, sentence: &str, nal: bool) -> Result<String, JsError> {
        self.core.translate(sentence, nal).map_err(js_err)
    }
}
