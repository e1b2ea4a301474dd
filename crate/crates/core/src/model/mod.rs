//! Post-norm encoder-decoder Transformer with a Noise Adaptation Layer (NAL)
//! after every self-attention sublayer.

mod checkpoint;
mod forward;

use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::rng::{stream_rng, Stream};
use crate::numerics::{Float, ParamId, ParamStore, Tensor};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC, VERSION,
};
pub use forward::{sinusoidal_positions, DecoderOut, EncoderOut, LayerContexts, Mode, Net, Pass};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Inner width of each NAL; `None` means `d_ff`.
    pub d_ff_nal: Option<usize>,
    /// Encoder and decoder depth `N`.
    pub layers: usize,
    pub dropout: f64,
    /// Source id space, real words plus made-up slots.
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub lambda_x: f64,
    pub lambda_y: f64,
    /// Encoder NALs exist.
    pub cer_encoder: bool,
    /// Decoder NALs exist.
    pub cer_decoder: bool,
    pub nal_active_at_test: bool,
    pub label_smoothing: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            n_heads: 4,
            d_ff: 256,
            d_ff_nal: None,
            layers: 2,
            dropout: 0.4,
            src_vocab: 0,
            tgt_vocab: 0,
            lambda_x: 1.0,
            lambda_y: 1.0,
            cer_encoder: true,
            cer_decoder: true,
            nal_active_at_test: true,
            label_smoothing: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn nal_width(&self) -> usize {
        self.d_ff_nal.unwrap_or(self.d_ff)
    }

    pub fn has_nal(&self, side: Side) -> bool {
        match side {
            Side::Encoder => self.cer_encoder,
            Side::Decoder => self.cer_decoder,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.layers == 0 {
            return bad("layers must be at least 1".into());
        }
        if self.d_ff == 0 || self.nal_width() == 0 {
            return bad("feed-forward widths must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label_smoothing {} outside [0, 1)",
                self.label_smoothing
            ));
        }
        if self.lambda_x < 0.0 || self.lambda_y < 0.0 {
            return bad("loss weights must be non-negative".into());
        }
        if self.src_vocab <= crate::corpus::NUM_SPECIALS
            || self.tgt_vocab <= crate::corpus::NUM_SPECIALS
        {
            return bad(format!(
                "vocabulary sizes {} / {} leave no room for words",
                self.src_vocab, self.tgt_vocab
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

#[derive(Clone, Copy, Debug)]
pub struct AttnIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

/// Position-wise `relu(x·w1 + b1)·w2 + b2`; shared shape of the FFN sublayer and NALs.
#[derive(Clone, Copy, Debug)]
pub struct FfnIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderLayerIds {
    pub self_attn: AttnIds,
    pub ln1: NormIds,
    pub ffn: FfnIds,
    pub ln2: NormIds,
    pub nal: Option<FfnIds>,
}

#[derive(Clone, Debug)]
pub struct DecoderLayerIds {
    pub self_attn: AttnIds,
    pub ln1: NormIds,
    pub cross_attn: AttnIds,
    pub ln2: NormIds,
    pub ffn: FfnIds,
    pub ln3: NormIds,
    pub nal: Option<FfnIds>,
}

/// Parameter handles for every tensor of a model.
#[derive(Clone, Debug)]
pub struct Layout {
    pub src_emb: ParamId,
    pub tgt_emb: ParamId,
    pub encoder: Vec<EncoderLayerIds>,
    pub decoder: Vec<DecoderLayerIds>,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    Xavier,
    Uniform(f64),
}

struct Spec {
    name: String,
    shape: Vec<usize>,
    init: Init,
    nal: Option<(Side, usize)>,
}

type PushSpec<'a> = dyn FnMut(String, Vec<usize>, Init, Option<(Side, usize)>) + 'a;

fn param_specs(cfg: &ModelConfig) -> Vec<Spec> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init, nal: Option<(Side, usize)>| {
        out.push(Spec {
            name,
            shape,
            init,
            nal,
        })
    };
    push("src_emb".into(), vec![cfg.src_vocab, d], Init::Zeros, None);
    push("tgt_emb".into(), vec![cfg.tgt_vocab, d], Init::Zeros, None);
    let attn = |push: &mut PushSpec, p: &str| {
        for m in ["q", "k", "v", "o"] {
            push(format!("{p}.w{m}"), vec![d, d], Init::Xavier, None);
            push(format!("{p}.b{m}"), vec![d], Init::Zeros, None);
        }
    };
    let norm = |push: &mut PushSpec, p: &str| {
        push(format!("{p}.gamma"), vec![d], Init::Ones, None);
        push(format!("{p}.beta"), vec![d], Init::Zeros, None);
    };
    let ffn = |push: &mut PushSpec, p: &str, w: usize, init: Init, nal| {
        push(format!("{p}.w1"), vec![d, w], init, nal);
        push(
            format!("{p}.b1"),
            vec![w],
            if nal.is_some() { init } else { Init::Zeros },
            nal,
        );
        push(format!("{p}.w2"), vec![w, d], init, nal);
        push(
            format!("{p}.b2"),
            vec![d],
            if nal.is_some() { init } else { Init::Zeros },
            nal,
        );
    };
    let nal_init = Init::Uniform(NAL_INIT_RANGE);
    for l in 0..cfg.layers {
        let p = format!("enc.{l}");
        attn(&mut push, &format!("{p}.self"));
        norm(&mut push, &format!("{p}.ln1"));
        ffn(&mut push, &format!("{p}.ffn"), cfg.d_ff, Init::Xavier, None);
        norm(&mut push, &format!("{p}.ln2"));
        if cfg.cer_encoder {
            ffn(
                &mut push,
                &format!("{p}.nal"),
                cfg.nal_width(),
                nal_init,
                Some((Side::Encoder, l)),
            );
        }
    }
    for l in 0..cfg.layers {
        let p = format!("dec.{l}");
        attn(&mut push, &format!("{p}.self"));
        norm(&mut push, &format!("{p}.ln1"));
        attn(&mut push, &format!("{p}.cross"));
        norm(&mut push, &format!("{p}.ln2"));
        ffn(&mut push, &format!("{p}.ffn"), cfg.d_ff, Init::Xavier, None);
        norm(&mut push, &format!("{p}.ln3"));
        if cfg.cer_decoder {
            ffn(
                &mut push,
                &format!("{p}.nal"),
                cfg.nal_width(),
                nal_init,
                Some((Side::Decoder, l)),
            );
        }
    }
    push("out.w".into(), vec![d, cfg.tgt_vocab], Init::Xavier, None);
    push("out.b".into(), vec![cfg.tgt_vocab], Init::Zeros, None);
    out
}

/// Half-width of the uniform NAL initialization.
pub const NAL_INIT_RANGE: f64 = 0.1;

/// Each NAL tensor gets its own init stream.
fn nal_stream_index(side: Side, layer: usize, name: &str) -> u64 {
    let k = ["w1", "b1", "w2", "b2"]
        .iter()
        .position(|s| name.ends_with(s))
        .expect("nal tensor name") as u64;
    100 + 8 * layer as u64 + 4 * (side == Side::Decoder) as u64 + k
}

impl Layout {
    /// Resolves handles by name; fails if `store` lacks a tensor `cfg` needs
    /// or carries one it does not.
    pub fn resolve<T: Float>(cfg: &ModelConfig, store: &ParamStore<T>) -> Result<Layout> {
        let specs = param_specs(cfg);
        for s in &specs {
            match store.id(&s.name) {
                None => return Err(Error::Checkpoint(format!("missing parameter `{}`", s.name))),
                Some(id) if store.get(id).shape() != s.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "`{}` has shape {:?}, expected {:?}",
                        s.name,
                        store.get(id).shape(),
                        s.shape
                    )))
                }
                _ => {}
            }
        }
        if store.len() != specs.len() {
            let extra: Vec<&str> = store
                .iter()
                .map(|(_, n, _)| n)
                .filter(|n| !specs.iter().any(|s| s.name == *n))
                .collect();
            return Err(Error::Checkpoint(format!(
                "unexpected parameters {extra:?}"
            )));
        }
        let id = |n: String| store.id(&n).expect("checked above");
        let attn = |p: &str| AttnIds {
            wq: id(format!("{p}.wq")),
            bq: id(format!("{p}.bq")),
            wk: id(format!("{p}.wk")),
            bk: id(format!("{p}.bk")),
            wv: id(format!("{p}.wv")),
            bv: id(format!("{p}.bv")),
            wo: id(format!("{p}.wo")),
            bo: id(format!("{p}.bo")),
        };
        let norm = |p: &str| NormIds {
            gamma: id(format!("{p}.gamma")),
            beta: id(format!("{p}.beta")),
        };
        let ffn = |p: &str| FfnIds {
            w1: id(format!("{p}.w1")),
            b1: id(format!("{p}.b1")),
            w2: id(format!("{p}.w2")),
            b2: id(format!("{p}.b2")),
        };
        let encoder = (0..cfg.layers)
            .map(|l| EncoderLayerIds {
                self_attn: attn(&format!("enc.{l}.self")),
                ln1: norm(&format!("enc.{l}.ln1")),
                ffn: ffn(&format!("enc.{l}.ffn")),
                ln2: norm(&format!("enc.{l}.ln2")),
                nal: cfg.cer_encoder.then(|| ffn(&format!("enc.{l}.nal"))),
            })
            .collect();
        let decoder = (0..cfg.layers)
            .map(|l| DecoderLayerIds {
                self_attn: attn(&format!("dec.{l}.self")),
                ln1: norm(&format!("dec.{l}.ln1")),
                cross_attn: attn(&format!("dec.{l}.cross")),
                ln2: norm(&format!("dec.{l}.ln2")),
                ffn: ffn(&format!("dec.{l}.ffn")),
                ln3: norm(&format!("dec.{l}.ln3")),
                nal: cfg.cer_decoder.then(|| ffn(&format!("dec.{l}.nal"))),
            })
            .collect();
        Ok(Layout {
            src_emb: id("src_emb".into()),
            tgt_emb: id("tgt_emb".into()),
            encoder,
            decoder,
            out_w: id("out.w".into()),
            out_b: id("out.b".into()),
        })
    }

    pub fn nal(&self, side: Side, layer: usize) -> Option<FfnIds> {
        match side {
            Side::Encoder => self.encoder[layer].nal,
            Side::Decoder => self.decoder[layer].nal,
        }
    }

    /// Every NAL parameter handle.
    pub fn nal_params(&self) -> Vec<ParamId> {
        let enc = self.encoder.iter().filter_map(|l| l.nal);
        let dec = self.decoder.iter().filter_map(|l| l.nal);
        enc.chain(dec)
            .flat_map(|f| [f.w1, f.b1, f.w2, f.b2])
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub layout: Layout,
}

impl<T: Float> Model<T> {
    /// Fresh model. Everything outside the NALs is drawn from one seeded
    /// stream in a fixed order, so two configs differing only in their NAL
    /// flags start from identical shared weights.
    ///
    /// Real embedding rows are `N(0, 1/d)`; made-up rows (`made_up_from`
    /// onward in the source table) are uniform with the same variance; NALs
    /// are uniform in `±NAL_INIT_RANGE`.
    pub fn new(config: ModelConfig, made_up_from: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if made_up_from > config.src_vocab {
            return Err(Error::Config(format!(
                "made-up range starts at {made_up_from} beyond source vocabulary {}",
                config.src_vocab
            )));
        }
        let d = config.d_model;
        let std = (d as f64).powf(-0.5);
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let normal = Normal::new(0.0, std).expect("finite std");
        let mut store = ParamStore::new();
        for spec in param_specs(&config) {
            let t = if let Some((side, layer)) = spec.nal {
                let mut nrng = stream_rng(
                    seed,
                    Stream::Init,
                    nal_stream_index(side, layer, &spec.name),
                );
                init_tensor(&spec.shape, spec.init, &mut nrng)
            } else if spec.name == "src_emb" || spec.name == "tgt_emb" {
                let real = if spec.name == "src_emb" {
                    made_up_from
                } else {
                    spec.shape[0]
                };
                let a = 3f64.sqrt() * std;
                Tensor::from_fn(spec.shape.clone(), |i| {
                    let v = if i / d < real {
                        normal.sample(&mut rng)
                    } else {
                        rng.random_range(-a..a)
                    };
                    T::from_f64_lossy(v)
                })
            } else {
                init_tensor(&spec.shape, spec.init, &mut rng)
            };
            store.add(spec.name, t);
        }
        let layout = Layout::resolve(&config, &store)?;
        Ok(Model {
            config,
            params: store,
            layout,
        })
    }

    /// Assembles a model from loaded parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        config.validate()?;
        let layout = Layout::resolve(&config, &params)?;
        Ok(Model {
            config,
            params,
            layout,
        })
    }

    pub fn net(&self) -> Net<'_, T> {
        Net::new(&self.config, &self.layout, &self.params)
    }

    /// Forward view over another store with this model's layout, such as a
    /// perturbed copy during gradient checks.
    pub fn net_with<'a>(&'a self, params: &'a ParamStore<T>) -> Net<'a, T> {
        Net::new(&self.config, &self.layout, params)
    }

    pub fn cast<U: Float>(&self) -> Model<U> {
        let params = self.params.cast();
        let layout = Layout::resolve(&self.config, &params).expect("same names and shapes");
        Model {
            config: self.config.clone(),
            params,
            layout,
        }
    }

    /// True when some NAL parameter is nonzero.
    pub fn nal_is_nonzero(&self) -> bool {
        self.layout
            .nal_params()
            .into_iter()
            .any(|id| self.params.get(id).data().iter().any(|&x| x != T::zero()))
    }
}

fn init_tensor<T: Float, R: rand::Rng>(shape: &[usize], init: Init, rng: &mut R) -> Tensor<T> {
    match init {
        Init::Zeros => Tensor::zeros(shape.to_vec()),
        Init::Ones => Tensor::full(shape.to_vec(), T::one()),
        Init::Xavier => {
            let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
            Tensor::from_fn(shape.to_vec(), |_| {
                T::from_f64_lossy(rng.random_range(-a..a))
            })
        }
        Init::Uniform(a) => Tensor::from_fn(shape.to_vec(), |_| {
            T::from_f64_lossy(rng.random_range(-a..a))
        }),
    }
}
