use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{LayerContexts, Net, Side};
use crate::numerics::rng::{stream_rng, Stream};
use crate::numerics::{Adam, AdamConfig, Float, Graph, ParamId, ParamStore, Tensor, Var};

fn check_pair<T: Float>(
    g: &Graph<T>,
    clean: &LayerContexts,
    noisy: &LayerContexts,
    op: &'static str,
) -> Result<()> {
    if clean.len() != noisy.len() || clean.is_empty() {
        return Err(Error::shape(
            op,
            format!("{} clean vs {} noisy layers", clean.len(), noisy.len()),
        ));
    }
    for (l, (&c, &n)) in clean.layers.iter().zip(&noisy.layers).enumerate() {
        if g.value(c).shape() != g.value(n).shape() {
            return Err(Error::shape(
                op,
                format!(
                    "layer {l}: {:?} vs {:?}",
                    g.value(c).shape(),
                    g.value(n).shape()
                ),
            ));
        }
    }
    Ok(())
}

/// Reconstruction loss `Σ_l Σ_t w_t ||sg(c_l,t) − NAL_l(c′_l,t)||² / norm`
/// with the clean contexts gradient-blocked.
pub fn nal_loss<T: Float>(
    g: &mut Graph<T>,
    net: &Net<'_, T>,
    side: Side,
    clean: &LayerContexts,
    noisy: &LayerContexts,
    weights: &[T],
    norm: T,
) -> Result<Var> {
    check_pair(g, clean, noisy, "nal_loss")?;
    let mut terms = Vec::with_capacity(clean.len());
    for (l, (&c, &n)) in clean.layers.iter().zip(&noisy.layers).enumerate() {
        let target = g.detach(c);
        let restored = net.nal_apply(g, n, side, l)?;
        terms.push((g.sq_dist(target, restored, weights, norm)?, T::one()));
    }
    g.weighted_sum(&terms)
}

/// Direct closeness `Σ_l Σ_t w_t ||c_l,t − c′_l,t||² / norm`; gradient
/// reaches both paths.
pub fn con_loss<T: Float>(
    g: &mut Graph<T>,
    clean: &LayerContexts,
    noisy: &LayerContexts,
    weights: &[T],
    norm: T,
) -> Result<Var> {
    check_pair(g, clean, noisy, "con_loss")?;
    let mut terms = Vec::with_capacity(clean.len());
    for (&c, &n) in clean.layers.iter().zip(&noisy.layers) {
        terms.push((g.sq_dist(c, n, weights, norm)?, T::one()));
    }
    g.weighted_sum(&terms)
}

pub const DEFAULT_DISC_WIDTH: usize = 256;
const DISC_OUT_INIT: f64 = 0.01;

/// Per-token classifier `d_model → width → 1` (ReLU hidden, sigmoid output)
/// telling clean contexts (label 1) from noisy ones (label 0).
#[derive(Clone, Debug)]
pub struct Discriminator<T> {
    pub params: ParamStore<T>,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    optim: Adam<T>,
}

/// Which half of the alternating CER-D schedule a loss belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscMode {
    /// Train the discriminator; model contexts are constants.
    DUpdate,
    /// Train the model to fool the discriminator; its weights are constants.
    GUpdate,
}

impl<T: Float> Discriminator<T> {
    pub fn new(d_model: usize, width: usize, lr: f64, seed: u64, index: u64) -> Self {
        let mut rng = stream_rng(seed, Stream::Discriminator, index);
        let a = (6.0 / (d_model + width) as f64).sqrt();
        let mut params = ParamStore::new();
        let w1 = params.add(
            "disc.w1",
            Tensor::from_fn([d_model, width], |_| {
                T::from_f64_lossy(rng.random_range(-a..a))
            }),
        );
        let b1 = params.add("disc.b1", Tensor::zeros([width]));
        let w2 = params.add(
            "disc.w2",
            Tensor::from_fn([width, 1], |_| {
                T::from_f64_lossy(rng.random_range(-DISC_OUT_INIT..DISC_OUT_INIT))
            }),
        );
        let b2 = params.add("disc.b2", Tensor::zeros([1]));
        let cfg = AdamConfig {
            warmup_steps: 1,
            peak_lr: Some(lr),
            ..AdamConfig::default()
        };
        Discriminator {
            params,
            w1,
            b1,
            w2,
            b2,
            optim: Adam::new(cfg, d_model),
        }
    }

    /// Logits `n × 1`. With `frozen` the weights enter `g` as constants.
    pub fn logits(&self, g: &mut Graph<T>, x: Var, frozen: bool) -> Result<Var> {
        let mut p = |id: ParamId| {
            if frozen {
                g.constant(self.params.get(id).clone())
            } else {
                g.param(&self.params, id)
            }
        };
        let (w1, b1, w2, b2) = (p(self.w1), p(self.b1), p(self.w2), p(self.b2));
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }

    /// Probability of "clean" per row of `x`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let z = self.logits(&mut g, xv, true)?;
        Ok(g.value(z)
            .data()
            .iter()
            .map(|&z| crate::numerics::sigmoid(z))
            .collect())
    }

    /// Binary cross-entropy over clean (label 1) and noisy (label 0) rows,
    /// `Σ_l Σ_t w_t [bce(c) + bce(c′)] / (2 · norm)`.
    pub fn d_loss(
        &self,
        g: &mut Graph<T>,
        clean: &[Tensor<T>],
        noisy: &[Tensor<T>],
        weights: &[T],
        norm: T,
    ) -> Result<Var> {
        if clean.len() != noisy.len() {
            return Err(Error::shape(
                "disc_step",
                format!("{} vs {} layers", clean.len(), noisy.len()),
            ));
        }
        let two = T::one() + T::one();
        let mut terms = Vec::new();
        for (c, n) in clean.iter().zip(noisy) {
            for (x, label) in [(c, T::one()), (n, T::zero())] {
                let xv = g.constant(x.clone());
                let z = self.logits(g, xv, false)?;
                let labels = vec![label; weights.len()];
                terms.push((
                    g.bce_with_logits(z, &labels, weights, two * norm)?,
                    T::one(),
                ));
            }
        }
        g.weighted_sum(&terms)
    }

    /// Non-saturating generator loss `Σ_l Σ_t w_t · −log D(c′_l,t) / norm`
    /// with the discriminator frozen.
    pub fn g_loss(
        &self,
        g: &mut Graph<T>,
        noisy: &LayerContexts,
        weights: &[T],
        norm: T,
    ) -> Result<Var> {
        let ones = vec![T::one(); weights.len()];
        let mut terms = Vec::new();
        for &n in &noisy.layers {
            let z = self.logits(g, n, true)?;
            terms.push((g.bce_with_logits(z, &ones, weights, norm)?, T::one()));
        }
        g.weighted_sum(&terms)
    }

    /// One d-update on context values; returns the loss before the update.
    pub fn update(
        &mut self,
        clean: &[Tensor<T>],
        noisy: &[Tensor<T>],
        weights: &[T],
        norm: T,
    ) -> Result<f64> {
        let mut g = Graph::new();
        let loss = self.d_loss(&mut g, clean, noisy, weights, norm)?;
        let value = g.value(loss).item().to_f64_lossy();
        let grads = g.backward(loss)?;
        self.optim.step(&mut self.params, &grads);
        Ok(value)
    }
}

/// CER-D step on one side. `DUpdate` trains `disc` on the current context
/// values and returns its loss; `GUpdate` adds the generator loss to `g`
/// and returns its value.
#[allow(clippy::too_many_arguments)]
pub fn disc_step<T: Float>(
    g: &mut Graph<T>,
    disc: &mut Discriminator<T>,
    clean: &LayerContexts,
    noisy: &LayerContexts,
    weights: &[T],
    norm: T,
    mode: DiscMode,
) -> Result<(f64, Option<Var>)> {
    check_pair(g, clean, noisy, "disc_step")?;
    match mode {
        DiscMode::DUpdate => {
            let c: Vec<Tensor<T>> = clean.layers.iter().map(|&v| g.value(v).clone()).collect();
            let n: Vec<Tensor<T>> = noisy.layers.iter().map(|&v| g.value(v).clone()).collect();
            Ok((disc.update(&c, &n, weights, norm)?, None))
        }
        DiscMode::GUpdate => {
            let v = disc.g_loss(g, noisy, weights, norm)?;
            Ok((g.value(v).item().to_f64_lossy(), Some(v)))
        }
    }
}
