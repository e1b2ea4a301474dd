use rand::SeedableRng;

use super::{AttnIds, FfnIds, Layout, ModelConfig, NormIds, Side};
use crate::error::{Error, Result};
use crate::numerics::rng::Rng;
use crate::numerics::{AttentionSpec, Float, Graph, ParamId, ParamStore, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

/// How a single forward pass runs.
#[derive(Clone, Copy, Debug)]
pub struct Pass {
    pub mode: Mode,
    /// Route each context through its NAL (inference only; ignored in training).
    pub nal: bool,
    /// Seed of the dropout stream. Passes sharing a seed draw identical masks.
    pub dropout_seed: u64,
    /// Stop once the last layer's context is recorded.
    pub contexts_only: bool,
}

impl Pass {
    pub fn train(dropout_seed: u64) -> Self {
        Pass {
            mode: Mode::Train,
            nal: false,
            dropout_seed,
            contexts_only: false,
        }
    }

    pub fn infer(nal: bool) -> Self {
        Pass {
            mode: Mode::Infer,
            nal,
            dropout_seed: 0,
            contexts_only: false,
        }
    }

    pub fn contexts_only(mut self) -> Self {
        self.contexts_only = true;
        self
    }
}

/// Per-layer self-attention sublayer outputs `c_l` (after residual and
/// layer norm), each `(batch · len) × d_model`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerContexts {
    pub layers: Vec<Var>,
}

impl LayerContexts {
    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOut {
    /// Final encoder states; absent for a contexts-only pass.
    pub states: Option<Var>,
    pub contexts: LayerContexts,
}

#[derive(Clone, Debug)]
pub struct DecoderOut {
    /// `(batch · len) × tgt_vocab`; absent for a contexts-only pass.
    pub logits: Option<Var>,
    pub contexts: LayerContexts,
}

/// Sinusoidal position table for `len` positions, `len × d`.
pub fn sinusoidal_positions<T: Float>(len: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn([len, d], |i| {
        let (pos, j) = ((i / d) as f64, i % d);
        let freq = 10000f64.powf(-((j - j % 2) as f64) / d as f64);
        let v = if j % 2 == 0 {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        };
        T::from_f64_lossy(v)
    })
}

/// Borrowed forward view: config, layout and a parameter store.
#[derive(Clone, Copy)]
pub struct Net<'a, T> {
    pub cfg: &'a ModelConfig,
    pub layout: &'a Layout,
    pub params: &'a ParamStore<T>,
}

struct Dropout {
    p: f64,
    rng: Rng,
}

impl Dropout {
    fn new(pass: &Pass, p: f64) -> Self {
        let p = if pass.mode == Mode::Train { p } else { 0.0 };
        Dropout {
            p,
            rng: Rng::seed_from_u64(pass.dropout_seed),
        }
    }

    fn apply<T: Float>(&mut self, g: &mut Graph<T>, x: Var) -> Var {
        g.dropout(x, self.p, &mut self.rng)
    }
}

impl<'a, T: Float> Net<'a, T> {
    pub fn new(cfg: &'a ModelConfig, layout: &'a Layout, params: &'a ParamStore<T>) -> Self {
        Net {
            cfg,
            layout,
            params,
        }
    }

    /// `table[id] · √d + position` for a `batch × len` id grid. Overridden
    /// positions (flat index, raw table-space vector) take the given vector,
    /// scaled and positioned the same way.
    pub fn embed(
        &self,
        g: &mut Graph<T>,
        side: Side,
        ids: &[u32],
        batch: usize,
        len: usize,
        overrides: &[(usize, Vec<T>)],
    ) -> Result<Var> {
        if ids.len() != batch * len {
            return Err(Error::shape(
                "embed",
                format!("{} ids for {batch}×{len}", ids.len()),
            ));
        }
        let table = match side {
            Side::Encoder => self.layout.src_emb,
            Side::Decoder => self.layout.tgt_emb,
        };
        let d = self.cfg.d_model;
        let e = g.embedding(self.params, table, ids, overrides)?;
        let e = g.scale(e, T::from_usize(d).unwrap().sqrt());
        let pe = sinusoidal_positions::<T>(len, d);
        let mut pos = Tensor::zeros([batch * len, d]);
        for chunk in pos.data_mut().chunks_mut(len * d) {
            chunk.copy_from_slice(pe.data());
        }
        g.add_const(e, &pos)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn encode(
        &self,
        g: &mut Graph<T>,
        ids: &[u32],
        batch: usize,
        len: usize,
        mask: &[bool],
        overrides: &[(usize, Vec<T>)],
        pass: &Pass,
    ) -> Result<EncoderOut> {
        let x = self.embed(g, Side::Encoder, ids, batch, len, overrides)?;
        self.encode_embedded(g, x, batch, len, mask, pass)
    }

    /// Encoder stack over already-embedded input.
    pub fn encode_embedded(
        &self,
        g: &mut Graph<T>,
        x: Var,
        batch: usize,
        len: usize,
        mask: &[bool],
        pass: &Pass,
    ) -> Result<EncoderOut> {
        let mut drop = Dropout::new(pass, self.cfg.dropout);
        let spec = AttentionSpec {
            batch,
            q_len: len,
            k_len: len,
            heads: self.cfg.n_heads,
            causal: false,
            key_mask: mask.to_vec(),
        };
        let mut x = drop.apply(g, x);
        let mut contexts = LayerContexts::default();
        let n = self.layout.encoder.len();
        for (l, layer) in self.layout.encoder.iter().enumerate() {
            let a = self.attention(g, x, x, &layer.self_attn, spec.clone())?;
            let a = drop.apply(g, a);
            let r = g.add(x, a)?;
            let c = self.norm(g, r, &layer.ln1)?;
            contexts.layers.push(c);
            if pass.contexts_only && l + 1 == n {
                return Ok(EncoderOut {
                    states: None,
                    contexts,
                });
            }
            let h = self.maybe_nal(g, c, Side::Encoder, l, pass)?;
            let f = self.ffn(g, h, &layer.ffn)?;
            let f = drop.apply(g, f);
            let r = g.add(h, f)?;
            x = self.norm(g, r, &layer.ln2)?;
        }
        Ok(EncoderOut {
            states: Some(x),
            contexts,
        })
    }

    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph<T>,
        ids: &[u32],
        batch: usize,
        len: usize,
        mask: &[bool],
        enc: Var,
        src_len: usize,
        src_mask: &[bool],
        overrides: &[(usize, Vec<T>)],
        pass: &Pass,
    ) -> Result<DecoderOut> {
        let y = self.embed(g, Side::Decoder, ids, batch, len, overrides)?;
        self.decode_embedded(g, y, batch, len, mask, enc, src_len, src_mask, pass)
    }

    /// Decoder stack over already-embedded (shifted) targets, attending to
    /// encoder states `enc` of shape `(batch · src_len) × d_model`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_embedded(
        &self,
        g: &mut Graph<T>,
        y: Var,
        batch: usize,
        len: usize,
        mask: &[bool],
        enc: Var,
        src_len: usize,
        src_mask: &[bool],
        pass: &Pass,
    ) -> Result<DecoderOut> {
        let mut drop = Dropout::new(pass, self.cfg.dropout);
        let self_spec = AttentionSpec {
            batch,
            q_len: len,
            k_len: len,
            heads: self.cfg.n_heads,
            causal: true,
            key_mask: mask.to_vec(),
        };
        let cross_spec = AttentionSpec {
            batch,
            q_len: len,
            k_len: src_len,
            heads: self.cfg.n_heads,
            causal: false,
            key_mask: src_mask.to_vec(),
        };
        let mut y = drop.apply(g, y);
        let mut contexts = LayerContexts::default();
        let n = self.layout.decoder.len();
        for (l, layer) in self.layout.decoder.iter().enumerate() {
            let a = self.attention(g, y, y, &layer.self_attn, self_spec.clone())?;
            let a = drop.apply(g, a);
            let r = g.add(y, a)?;
            let c = self.norm(g, r, &layer.ln1)?;
            contexts.layers.push(c);
            if pass.contexts_only && l + 1 == n {
                return Ok(DecoderOut {
                    logits: None,
                    contexts,
                });
            }
            let h = self.maybe_nal(g, c, Side::Decoder, l, pass)?;
            let x = self.attention(g, h, enc, &layer.cross_attn, cross_spec.clone())?;
            let x = drop.apply(g, x);
            let r = g.add(h, x)?;
            let z = self.norm(g, r, &layer.ln2)?;
            let f = self.ffn(g, z, &layer.ffn)?;
            let f = drop.apply(g, f);
            let r = g.add(z, f)?;
            y = self.norm(g, r, &layer.ln3)?;
        }
        let w = g.param(self.params, self.layout.out_w);
        let b = g.param(self.params, self.layout.out_b);
        let logits = g.linear(y, w, b)?;
        Ok(DecoderOut {
            logits: Some(logits),
            contexts,
        })
    }

    /// `NAL_l(c)`: position-wise ReLU feed-forward map, no residual, no norm.
    pub fn nal_apply(&self, g: &mut Graph<T>, c: Var, side: Side, layer: usize) -> Result<Var> {
        let ids = self
            .layout
            .nal(side, layer)
            .ok_or_else(|| Error::Config(format!("no {side:?} NAL at layer {layer}")))?;
        self.ffn(g, c, &ids)
    }

    fn maybe_nal(
        &self,
        g: &mut Graph<T>,
        c: Var,
        side: Side,
        layer: usize,
        pass: &Pass,
    ) -> Result<Var> {
        if pass.mode == Mode::Infer && pass.nal && self.layout.nal(side, layer).is_some() {
            self.nal_apply(g, c, side, layer)
        } else {
            Ok(c)
        }
    }

    fn ffn(&self, g: &mut Graph<T>, x: Var, ids: &FfnIds) -> Result<Var> {
        let w1 = g.param(self.params, ids.w1);
        let b1 = g.param(self.params, ids.b1);
        let w2 = g.param(self.params, ids.w2);
        let b2 = g.param(self.params, ids.b2);
        let h = g.linear(x, w1, b1)?;
        let h = g.relu(h);
        g.linear(h, w2, b2)
    }

    fn norm(&self, g: &mut Graph<T>, x: Var, ids: &NormIds) -> Result<Var> {
        let gamma = g.param(self.params, ids.gamma);
        let beta = g.param(self.params, ids.beta);
        g.layer_norm(x, gamma, beta)
    }

    fn attention(
        &self,
        g: &mut Graph<T>,
        xq: Var,
        xkv: Var,
        ids: &AttnIds,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let q = self.project(g, xq, ids.wq, ids.bq)?;
        let k = self.project(g, xkv, ids.wk, ids.bk)?;
        let v = self.project(g, xkv, ids.wv, ids.bv)?;
        let a = g.attention(q, k, v, spec)?;
        self.project(g, a, ids.wo, ids.bo)
    }

    fn project(&self, g: &mut Graph<T>, x: Var, w: ParamId, b: ParamId) -> Result<Var> {
        let w = g.param(self.params, w);
        let b = g.param(self.params, b);
        g.linear(x, w, b)
    }
}
