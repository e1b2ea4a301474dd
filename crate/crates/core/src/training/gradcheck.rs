//! Finite-difference checks of the model and objective gradients, in f64.

use rand::{Rng as _, SeedableRng};

use super::{objective, NoiseConfig, StepInputs, Trainer, Variant, VariantConfig};
use crate::corpus::{EncodedPair, ParallelBatch, Vocabulary, BOS, EOS};
use crate::error::Result;
use crate::model::{Model, ModelConfig, Pass};
use crate::numerics::rng::Rng;
use crate::numerics::{grad_check, grad_check_params, AdamConfig, GradCheckReport, Graph, Tensor};

pub const STEP: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;
pub const PRIMITIVE_TOL: f64 = 1e-6;

/// Tiny model (d_model 8, one layer, 2 heads, 12 real source words plus 4
/// made-up slots) with vocabularies and a 2-sentence batch.
pub struct TinyFixture {
    pub model: Model<f64>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    pub batch: ParallelBatch,
}

pub fn tiny_fixture(variant: Variant, seed: u64) -> Result<TinyFixture> {
    let src_vocab = Vocabulary::from_words((0..8).map(|i| format!("s{i}")), 4);
    let tgt_vocab = Vocabulary::from_words((0..8).map(|i| format!("t{i}")), 0);
    let mut cfg = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        layers: 1,
        dropout: 0.1,
        src_vocab: src_vocab.total_size(),
        tgt_vocab: tgt_vocab.total_size(),
        ..ModelConfig::default()
    };
    variant.configure(&mut cfg);
    let model = Model::new(cfg, src_vocab.real_size(), seed)?;
    let pairs = [
        EncodedPair {
            src: vec![4, 7, 9, 5],
            tgt: vec![BOS, 6, 8, 5, EOS],
        },
        EncodedPair {
            src: vec![10, 6, 11],
            tgt: vec![BOS, 11, 4, EOS],
        },
    ];
    Ok(TinyFixture {
        model,
        src_vocab,
        tgt_vocab,
        batch: ParallelBatch::from_pairs(&pairs),
    })
}

/// Single matmul followed by mean squared error against a fixed target.
pub fn matmul_mse_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut rand = |shape: [usize; 2]| Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0));
    let (a, b, y) = (rand([3, 4]), rand([4, 5]), rand([3, 5]));
    grad_check(
        &[a, b],
        |g, v| {
            let p = g.matmul(v[0], v[1])?;
            let t = g.constant(y.clone());
            g.mse(p, t)
        },
        STEP,
        PRIMITIVE_TOL,
    )
}

/// One encoder layer with its NAL in the forward path.
pub fn encoder_layer_check(seed: u64) -> Result<GradCheckReport> {
    let fx = tiny_fixture(Variant::Cer, seed)?;
    let b = &fx.batch;
    let mask = b.src_mask();
    let w = vec![1.0; mask.len()];
    grad_check_params(
        &fx.model.params,
        |g, store| {
            let net = fx.model.net_with(store);
            let out = net.encode(
                g,
                &b.src,
                b.size(),
                b.src_max,
                &mask,
                &[],
                &Pass::infer(true),
            )?;
            let z = g.constant(Tensor::zeros([mask.len(), 8]));
            // mean square keeps the loss O(1) so round-off stays below the tolerance
            g.sq_dist(out.states.expect("full pass"), z, &w, (8 * w.len()) as f64)
        },
        STEP,
        MODEL_TOL,
    )
}

/// Full training objective (translation loss plus both reconstruction
/// losses) of `variant` on the tiny fixture, with perturbation at rate 0.5
/// so both sides see noise, and dropout active with fixed masks.
///
/// For the NAL variants the clean contexts act as constant targets in the
/// reconstruction terms, which is what the stop-gradient means.
pub fn objective_check(variant: Variant, seed: u64) -> Result<GradCheckReport> {
    let fx = tiny_fixture(variant, seed)?;
    let noise = NoiseConfig {
        sigma_x: 0.5,
        sigma_y: 0.5,
        m: 2,
        ..NoiseConfig::default()
    };
    let trainer = Trainer::new(
        fx.model.clone(),
        VariantConfig {
            disc_width: 16,
            ..VariantConfig::new(variant)
        },
        noise,
        AdamConfig::default(),
        fx.src_vocab.clone(),
        fx.tgt_vocab.clone(),
        seed,
    )?;
    let mut inputs: StepInputs<f64> = trainer.next_inputs(&fx.batch)?;
    let discs = trainer.discriminators();
    // The reconstruction target is gradient-blocked, so the derivative being
    // checked holds it at its unperturbed value.
    if variant.uses_nal() {
        let mut g = Graph::new();
        let lv = objective(
            &mut g,
            &fx.model.net(),
            &trainer.variant,
            &fx.batch,
            &inputs,
            discs,
        )?;
        let values = |c: &crate::model::LayerContexts| {
            c.layers.iter().map(|&v| g.value(v).clone()).collect()
        };
        inputs.frozen_targets = Some((values(&lv.enc_clean), values(&lv.dec_clean)));
    }
    grad_check_params(
        &fx.model.params,
        |g: &mut Graph<f64>, store| {
            let net = fx.model.net_with(store);
            Ok(objective(g, &net, &trainer.variant, &fx.batch, &inputs, discs)?.total)
        },
        STEP,
        MODEL_TOL,
    )
}

/// Every check above, named.
pub fn run_suite(seed: u64) -> Result<Vec<(String, GradCheckReport)>> {
    let mut out = vec![
        ("matmul+mse".to_string(), matmul_mse_check(seed)?),
        (
            "encoder layer with NAL".to_string(),
            encoder_layer_check(seed)?,
        ),
    ];
    for v in [Variant::Cer, Variant::CerCon, Variant::CerD] {
        out.push((format!("{v} objective"), objective_check(v, seed)?));
    }
    Ok(out)
}
