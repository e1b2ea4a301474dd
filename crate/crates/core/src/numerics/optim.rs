use serde::{Deserialize, Serialize};

use super::{Float, Gradients, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    /// Learning rate reached at the end of warmup. `None` uses the
    /// `d_model^-0.5 · warmup^-0.5` peak of the original schedule.
    pub peak_lr: Option<f64>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 4000,
            peak_lr: None,
        }
    }
}

impl AdamConfig {
    /// Inverse-square-root schedule with linear warmup, for 1-based `step`.
    pub fn lr(&self, step: u64, d_model: usize) -> f64 {
        let s = step.max(1) as f64;
        let w = self.warmup_steps.max(1) as f64;
        let peak = self
            .peak_lr
            .unwrap_or_else(|| (d_model as f64).powf(-0.5) * w.powf(-0.5));
        peak * (s / w).min((w / s).sqrt())
    }
}

#[derive(Clone, Debug)]
struct Moments<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam with bias correction and the warmup schedule of [`AdamConfig::lr`].
#[derive(Clone, Debug)]
pub struct Adam<T> {
    cfg: AdamConfig,
    d_model: usize,
    step: u64,
    state: Vec<Option<Moments<T>>>,
}

impl<T: Float> Adam<T> {
    pub fn new(cfg: AdamConfig, d_model: usize) -> Self {
        Adam {
            cfg,
            d_model,
            step: 0,
            state: Vec::new(),
        }
    }

    pub fn config(&self) -> &AdamConfig {
        &self.cfg
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Learning rate the next call to [`Adam::step`] will use.
    pub fn next_lr(&self) -> f64 {
        self.cfg.lr(self.step + 1, self.d_model)
    }

    /// Applies one update. Parameters without a gradient are left alone.
    /// Returns the learning rate used.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> f64 {
        self.step += 1;
        let lr = self.cfg.lr(self.step, self.d_model);
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        let b1 = T::from_f64_lossy(self.cfg.beta1);
        let b2 = T::from_f64_lossy(self.cfg.beta2);
        let one = T::one();
        let step_size = T::from_f64_lossy(lr / bc1);
        let inv_bc2 = T::from_f64_lossy(1.0 / bc2);
        let eps = T::from_f64_lossy(self.cfg.eps);
        if self.state.len() < store.len() {
            self.state.resize(store.len(), None);
        }
        for id in store.ids().collect::<Vec<_>>() {
            let Some(g) = grads.get(id) else { continue };
            let p = store.get_mut(id);
            let st = self.state[id.index()].get_or_insert_with(|| Moments {
                m: vec![T::zero(); p.numel()],
                v: vec![T::zero(); p.numel()],
            });
            for (((x, &gi), m), v) in p
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(st.m.iter_mut())
                .zip(st.v.iter_mut())
            {
                *m = b1 * *m + (one - b1) * gi;
                *v = b2 * *v + (one - b2) * gi * gi;
                *x -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
            }
        }
        lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Graph, Tensor};

    #[test]
    fn schedule_peaks_at_warmup() {
        let cfg = AdamConfig {
            warmup_steps: 100,
            peak_lr: Some(1e-3),
            ..Default::default()
        };
        assert!((cfg.lr(100, 64) - 1e-3).abs() < 1e-15);
        assert!((cfg.lr(50, 64) - 5e-4).abs() < 1e-15);
        assert!((cfg.lr(400, 64) - 5e-4).abs() < 1e-15);
    }

    #[test]
    fn default_peak_matches_noam_formula() {
        let cfg = AdamConfig::default();
        let d = 512usize;
        for step in [1u64, 100, 4000, 10000] {
            let s = step as f64;
            let noam = (d as f64).powf(-0.5) * s.powf(-0.5).min(s * 4000f64.powf(-1.5));
            assert!((cfg.lr(step, d) - noam).abs() < 1e-12);
        }
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("x", Tensor::new([2], vec![3.0, -2.0]).unwrap());
        let target = Tensor::new([2], vec![1.0, 1.0]).unwrap();
        let mut opt = Adam::new(
            AdamConfig {
                warmup_steps: 1,
                peak_lr: Some(0.05),
                ..Default::default()
            },
            1,
        );
        for _ in 0..2000 {
            let mut g = Graph::new();
            let x = g.param(&store, id);
            let t = g.constant(target.clone());
            let loss = g.mse(x, t).unwrap();
            let grads = g.backward(loss).unwrap();
            opt.step(&mut store, &grads);
        }
        assert!(store.get(id).max_abs_diff(&target) < 1e-2);
    }
}
