use super::{DiscMode, Discriminator, LossBreakdown, NoiseConfig, StepLog, Variant, VariantConfig};
use crate::corpus::{BatchStream, EncodedPair, ParallelBatch, Vocabulary};
use crate::error::{Error, Result};
use crate::model::{LayerContexts, Model, Net, Pass, Side};
use crate::numerics::rng::{derive_seed, stream_rng, Stream};
use crate::numerics::{Adam, AdamConfig, Float, Graph, Tensor, Var};
use crate::perturb::{apply_strategy, PerturbationPlan};

use super::loss::{con_loss, disc_step, nal_loss};

/// Per-step randomness, fixed before the graph is built: the two
/// perturbation plans and the dropout seeds shared by clean and noisy passes.
#[derive(Clone, Debug)]
pub struct StepInputs<T> {
    pub src_plan: PerturbationPlan<T>,
    pub tgt_plan: PerturbationPlan<T>,
    pub enc_seed: u64,
    pub dec_seed: u64,
    /// Encoder and decoder reconstruction targets given as fixed values
    /// instead of the (gradient-blocked) clean contexts of this evaluation.
    /// Finite-difference checks use this to hold the blocked target still.
    pub frozen_targets: Option<FrozenTargets<T>>,
}

/// Per-layer encoder and decoder targets.
pub type FrozenTargets<T> = (Vec<Tensor<T>>, Vec<Tensor<T>>);

impl<T: Float> StepInputs<T> {
    /// No perturbation, given dropout seeds.
    pub fn clean(batch: &ParallelBatch, enc_seed: u64, dec_seed: u64) -> Self {
        StepInputs {
            src_plan: PerturbationPlan::empty(batch.size()),
            tgt_plan: PerturbationPlan::empty(batch.size()),
            enc_seed,
            dec_seed,
            frozen_targets: None,
        }
    }
}

/// Graph handles of one objective evaluation.
#[derive(Clone, Debug)]
pub struct LossVars {
    pub total: Var,
    pub l_nmt: Var,
    pub l_nal_x: Option<Var>,
    pub l_nal_y: Option<Var>,
    pub enc_clean: LayerContexts,
    pub dec_clean: LayerContexts,
    pub enc_noisy: Option<LayerContexts>,
    pub dec_noisy: Option<LayerContexts>,
}

fn weights<T: Float>(mask: &[bool]) -> (Vec<T>, T) {
    let w: Vec<T> = mask
        .iter()
        .map(|&m| if m { T::one() } else { T::zero() })
        .collect();
    let n = T::from_usize(mask.iter().filter(|&&m| m).count()).unwrap();
    (w, n)
}

/// Builds `L = L_nmt + λ_x·L^x + λ_y·L^y` in `g`.
///
/// The clean pair gives `L_nmt` and the clean contexts. The noisy source
/// (`src_plan`) reruns the encoder up to its last context; the perturbed
/// decoder input (`tgt_plan`) reruns the decoder against the clean encoder
/// states. What `L^x`, `L^y` measure depends on the variant; the baseline
/// runs no noisy pass and both are absent.
pub fn objective<T: Float>(
    g: &mut Graph<T>,
    net: &Net<'_, T>,
    variant: &VariantConfig,
    batch: &ParallelBatch,
    inputs: &StepInputs<T>,
    discs: Option<&[Discriminator<T>; 2]>,
) -> Result<LossVars> {
    let cfg = net.cfg;
    let (b, s, t) = (batch.size(), batch.src_max, batch.dec_len());
    let src_mask = batch.src_mask();
    let dec_mask = batch.dec_mask();
    let (src_w, src_n) = weights::<T>(&src_mask);
    let (dec_w, dec_n) = weights::<T>(&dec_mask);
    let dec_in = batch.dec_input();
    let enc_pass = Pass::train(inputs.enc_seed);
    let dec_pass = Pass::train(inputs.dec_seed);

    let enc = net.encode(g, &batch.src, b, s, &src_mask, &[], &enc_pass)?;
    let states = enc.states.expect("full pass");
    let dec = net.decode(
        g,
        &dec_in,
        b,
        t,
        &dec_mask,
        states,
        s,
        &src_mask,
        &[],
        &dec_pass,
    )?;
    let logits = dec.logits.expect("full pass");
    let smoothing = T::from_f64_lossy(cfg.label_smoothing);
    let l_nmt = g.cross_entropy(logits, &batch.dec_labels(), &dec_w, smoothing)?;

    let mut out = LossVars {
        total: l_nmt,
        l_nmt,
        l_nal_x: None,
        l_nal_y: None,
        enc_clean: enc.contexts,
        dec_clean: dec.contexts,
        enc_noisy: None,
        dec_noisy: None,
    };
    if variant.variant.uses_noise() {
        let noisy_src = inputs.src_plan.apply_ids(&batch.src, s);
        let src_over = inputs.src_plan.overrides(s);
        let enc_noisy = net.encode(
            g,
            &noisy_src,
            b,
            s,
            &src_mask,
            &src_over,
            &enc_pass.contexts_only(),
        )?;
        let tgt_over = inputs.tgt_plan.overrides(t);
        let dec_noisy = net.decode(
            g,
            &dec_in,
            b,
            t,
            &dec_mask,
            states,
            s,
            &src_mask,
            &tgt_over,
            &dec_pass.contexts_only(),
        )?;
        let adv = T::from_f64_lossy(variant.adv_weight);
        let side_loss = |g: &mut Graph<T>,
                         side: Side,
                         clean: &LayerContexts,
                         noisy: &LayerContexts,
                         w: &[T],
                         n: T| {
            match variant.variant {
                Variant::Cer | Variant::CerInactive => nal_loss(g, net, side, clean, noisy, w, n),
                Variant::CerCon => con_loss(g, clean, noisy, w, n),
                Variant::CerD => {
                    let d =
                        discs.ok_or_else(|| Error::Config("cer-d needs discriminators".into()))?;
                    let i = (side == Side::Decoder) as usize;
                    let v = d[i].g_loss(g, noisy, w, n)?;
                    Ok(g.scale(v, adv))
                }
                Variant::Baseline => unreachable!(),
            }
        };
        let (enc_target, dec_target) = match &inputs.frozen_targets {
            Some((e, d)) => {
                let mut constants = |ts: &[Tensor<T>]| LayerContexts {
                    layers: ts.iter().map(|t| g.constant(t.clone())).collect(),
                };
                (constants(e), constants(d))
            }
            None => (out.enc_clean.clone(), out.dec_clean.clone()),
        };
        out.l_nal_x = Some(side_loss(
            g,
            Side::Encoder,
            &enc_target,
            &enc_noisy.contexts,
            &src_w,
            src_n,
        )?);
        out.l_nal_y = Some(side_loss(
            g,
            Side::Decoder,
            &dec_target,
            &dec_noisy.contexts,
            &dec_w,
            dec_n,
        )?);
        out.enc_noisy = Some(enc_noisy.contexts);
        out.dec_noisy = Some(dec_noisy.contexts);
    }
    let mut terms = vec![(l_nmt, T::one())];
    if let (Some(x), Some(y)) = (out.l_nal_x, out.l_nal_y) {
        terms.push((x, T::from_f64_lossy(cfg.lambda_x)));
        terms.push((y, T::from_f64_lossy(cfg.lambda_y)));
    }
    out.total = g.weighted_sum(&terms)?;
    Ok(out)
}

/// Owns a model, its optimizer and (for CER-D) the discriminators, and
/// advances them one batch at a time.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub model: Model<T>,
    pub variant: VariantConfig,
    pub noise: NoiseConfig,
    pub optim: Adam<T>,
    pub src_vocab: Vocabulary,
    pub tgt_vocab: Vocabulary,
    discs: Option<Box<[Discriminator<T>; 2]>>,
    seed: u64,
    step: u64,
}

impl<T: Float> Trainer<T> {
    pub fn new(
        model: Model<T>,
        variant: VariantConfig,
        noise: NoiseConfig,
        optim: AdamConfig,
        src_vocab: Vocabulary,
        tgt_vocab: Vocabulary,
        seed: u64,
    ) -> Result<Self> {
        check_vocab(&model, &src_vocab, &tgt_vocab)?;
        let cfg = &model.config;
        if variant.variant.uses_nal() && !(cfg.cer_encoder && cfg.cer_decoder) {
            return Err(Error::Config(format!(
                "variant {} needs NAL parameters on both sides",
                variant.variant
            )));
        }
        if variant.variant.uses_noise() {
            noise.source().validate(&src_vocab)?;
            noise.target().validate(&tgt_vocab)?;
        }
        let discs = (variant.variant == Variant::CerD).then(|| {
            let d =
                |i| Discriminator::new(cfg.d_model, variant.disc_width, variant.disc_lr, seed, i);
            Box::new([d(0), d(1)])
        });
        let d_model = cfg.d_model;
        Ok(Trainer {
            model,
            variant,
            noise,
            optim: Adam::new(optim, d_model),
            src_vocab,
            tgt_vocab,
            discs,
            seed,
            step: 0,
        })
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn discriminators(&self) -> Option<&[Discriminator<T>; 2]> {
        self.discs.as_deref()
    }

    /// Randomness for the next step, drawn from the live embedding tables.
    pub fn next_inputs(&self, batch: &ParallelBatch) -> Result<StepInputs<T>> {
        let step = self.step + 1;
        let enc_seed = derive_seed(self.seed, Stream::EncoderDropout, step);
        let dec_seed = derive_seed(self.seed, Stream::DecoderDropout, step);
        if !self.variant.variant.uses_noise() {
            return Ok(StepInputs::clean(batch, enc_seed, dec_seed));
        }
        let p = &self.model.params;
        let src_plan = apply_strategy(
            &batch.src,
            batch.src_max,
            &batch.src_lens,
            &self.noise.source(),
            &self.src_vocab,
            p.get(self.model.layout.src_emb),
            &mut stream_rng(self.seed, Stream::SourceNoise, step),
        )?;
        let dec_lens: Vec<usize> = batch.tgt_lens.iter().map(|l| l - 1).collect();
        let tgt_plan = apply_strategy(
            &batch.dec_input(),
            batch.dec_len(),
            &dec_lens,
            &self.noise.target(),
            &self.tgt_vocab,
            p.get(self.model.layout.tgt_emb),
            &mut stream_rng(self.seed, Stream::TargetNoise, step),
        )?;
        Ok(StepInputs {
            src_plan,
            tgt_plan,
            enc_seed,
            dec_seed,
            frozen_targets: None,
        })
    }

    /// Clean and noisy forwards, backward on the total, one optimizer update
    /// (and, for CER-D, one discriminator update per side).
    pub fn train_step(&mut self, batch: &ParallelBatch) -> Result<(LossBreakdown, f64)> {
        let inputs = self.next_inputs(batch)?;
        self.train_step_with(batch, &inputs)
    }

    pub fn train_step_with(
        &mut self,
        batch: &ParallelBatch,
        inputs: &StepInputs<T>,
    ) -> Result<(LossBreakdown, f64)> {
        let mut g = Graph::new();
        let lv = objective(
            &mut g,
            &self.model.net(),
            &self.variant,
            batch,
            inputs,
            self.discs.as_deref(),
        )?;
        let breakdown = breakdown(&g, &lv, &self.model.config, batch);
        if !breakdown.total.is_finite() {
            log::error!("non-finite loss at step {}: {breakdown:?}", self.step + 1);
            return Err(Error::NonFiniteLoss {
                l_nmt: breakdown.l_nmt,
                l_nal_x: breakdown.l_nal_x,
                l_nal_y: breakdown.l_nal_y,
            });
        }
        let grads = g.backward(lv.total)?;
        let lr = self.optim.step(&mut self.model.params, &grads);
        if let Some(discs) = self.discs.as_deref_mut() {
            let (sw, sn) = weights::<T>(&batch.src_mask());
            let (dw, dn) = weights::<T>(&batch.dec_mask());
            let pairs = [
                (&lv.enc_clean, lv.enc_noisy.as_ref(), sw, sn),
                (&lv.dec_clean, lv.dec_noisy.as_ref(), dw, dn),
            ];
            for (d, (clean, noisy, w, n)) in discs.iter_mut().zip(pairs) {
                let noisy = noisy.expect("noisy pass ran");
                disc_step(&mut g, d, clean, noisy, &w, n, DiscMode::DUpdate)?;
            }
        }
        self.step += 1;
        Ok((breakdown, lr))
    }

    /// Objective value without updating anything.
    pub fn evaluate_loss(
        &self,
        batch: &ParallelBatch,
        inputs: &StepInputs<T>,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new();
        let lv = objective(
            &mut g,
            &self.model.net(),
            &self.variant,
            batch,
            inputs,
            self.discs.as_deref(),
        )?;
        Ok(breakdown(&g, &lv, &self.model.config, batch))
    }
}

fn breakdown<T: Float>(
    g: &Graph<T>,
    lv: &LossVars,
    cfg: &crate::model::ModelConfig,
    batch: &ParallelBatch,
) -> LossBreakdown {
    let val = |v: Option<Var>| v.map_or(0.0, |v| g.value(v).item().to_f64_lossy());
    LossBreakdown {
        l_nmt: val(Some(lv.l_nmt)),
        l_nal_x: val(lv.l_nal_x),
        l_nal_y: val(lv.l_nal_y),
        total: val(Some(lv.total)),
        lambda_x: cfg.lambda_x,
        lambda_y: cfg.lambda_y,
        tgt_tokens: batch.dec_mask().iter().filter(|&&m| m).count(),
        src_tokens: batch.src_mask().iter().filter(|&&m| m).count(),
    }
}

fn check_vocab<T: Float>(model: &Model<T>, src: &Vocabulary, tgt: &Vocabulary) -> Result<()> {
    let cfg = &model.config;
    if src.total_size() != cfg.src_vocab || tgt.total_size() != cfg.tgt_vocab {
        return Err(Error::VocabMismatch(format!(
            "model expects {} source / {} target ids, vocabularies give {} / {}",
            cfg.src_vocab,
            cfg.tgt_vocab,
            src.total_size(),
            tgt.total_size()
        )));
    }
    Ok(())
}

/// Runs `steps` updates over an endless seeded batch stream, calling
/// `on_step` after each.
pub fn train<T: Float>(
    trainer: &mut Trainer<T>,
    pairs: Vec<EncodedPair>,
    steps: u64,
    batch_tokens: usize,
    mut on_step: impl FnMut(&StepLog, &LossBreakdown) -> Result<()>,
) -> Result<Vec<StepLog>> {
    let mut logs = Vec::with_capacity(steps as usize);
    if steps == 0 {
        return Ok(logs);
    }
    let seed = derive_seed(trainer.seed(), Stream::Batching, 0);
    let mut stream = BatchStream::new(pairs, batch_tokens, seed)?;
    for _ in 0..steps {
        let batch = stream.next().expect("endless stream");
        let (b, lr) = trainer.train_step(&batch)?;
        let log = StepLog {
            step: trainer.steps_taken(),
            l_nmt: b.l_nmt,
            l_nal_x: b.l_nal_x,
            l_nal_y: b.l_nal_y,
            total: b.total,
            lr,
            tokens: b.src_tokens + b.tgt_tokens,
        };
        on_step(&log, &b)?;
        logs.push(log);
    }
    Ok(logs)
}

/// Copy of `model` shaped for `variant`: NAL tensors are added (freshly
/// initialized) or dropped as needed and every shared tensor is kept.
pub fn adapt_model<T: Float>(
    model: &Model<T>,
    variant: Variant,
    made_up_from: usize,
    seed: u64,
) -> Result<Model<T>> {
    let mut cfg = model.config.clone();
    variant.configure(&mut cfg);
    if cfg.cer_encoder == model.config.cer_encoder && cfg.cer_decoder == model.config.cer_decoder {
        let mut m = model.clone();
        m.config = cfg;
        return Ok(m);
    }
    let mut out = Model::new(cfg, made_up_from, seed)?;
    out.params.copy_shared_from(&model.params)?;
    Ok(out)
}

/// Continues training `base` on new pairs with a fresh optimizer (warmup
/// restarts). Returns the tuned model and its step log.
#[allow(clippy::too_many_arguments)]
pub fn fine_tune<T: Float>(
    base: &Model<T>,
    src_vocab: &Vocabulary,
    tgt_vocab: &Vocabulary,
    pairs: Vec<EncodedPair>,
    variant: VariantConfig,
    noise: NoiseConfig,
    optim: AdamConfig,
    steps: u64,
    batch_tokens: usize,
    seed: u64,
    on_step: impl FnMut(&StepLog, &LossBreakdown) -> Result<()>,
) -> Result<(Model<T>, Vec<StepLog>)> {
    check_vocab(base, src_vocab, tgt_vocab)?;
    let model = adapt_model(base, variant.variant, src_vocab.real_size(), seed)?;
    let mut trainer = Trainer::new(
        model,
        variant,
        noise,
        optim,
        src_vocab.clone(),
        tgt_vocab.clone(),
        seed,
    )?;
    let logs = train(&mut trainer, pairs, steps, batch_tokens, on_step)?;
    Ok((trainer.model, logs))
}
