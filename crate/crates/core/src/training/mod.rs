//! The CER objective, training steps for every variant, and fine-tuning.

pub mod gradcheck;
mod loss;
mod step;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::{AdamConfig, Float};
use crate::perturb::{
    PerturbationSpec, Strategy, DEFAULT_GAUSSIAN_STD, DEFAULT_NEIGHBORS, DEFAULT_RATE,
};

pub use loss::{con_loss, disc_step, nal_loss, DiscMode, Discriminator, DEFAULT_DISC_WIDTH};
pub use step::{adapt_model, fine_tune, objective, train, LossVars, StepInputs, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "baseline")]
    Baseline,
    #[serde(rename = "cer")]
    Cer,
    /// Trained exactly like CER, decoded with the NALs bypassed.
    #[serde(rename = "cer-inactive")]
    CerInactive,
    /// No NAL; clean and noisy contexts pulled together directly.
    #[serde(rename = "cer-con")]
    CerCon,
    /// No NAL; a discriminator per side and an adversarial loss.
    #[serde(rename = "cer-d")]
    CerD,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Baseline,
        Variant::Cer,
        Variant::CerInactive,
        Variant::CerCon,
        Variant::CerD,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Cer => "cer",
            Variant::CerInactive => "cer-inactive",
            Variant::CerCon => "cer-con",
            Variant::CerD => "cer-d",
        }
    }

    pub fn uses_nal(self) -> bool {
        matches!(self, Variant::Cer | Variant::CerInactive)
    }

    /// Noisy forwards run at all.
    pub fn uses_noise(self) -> bool {
        self != Variant::Baseline
    }

    /// Sets the NAL flags of `cfg` to what this variant needs.
    pub fn configure(self, cfg: &mut ModelConfig) {
        cfg.cer_encoder = self.uses_nal();
        cfg.cer_decoder = self.uses_nal();
        cfg.nal_active_at_test = self == Variant::Cer;
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VariantConfig {
    pub variant: Variant,
    /// CER-D hidden width.
    pub disc_width: usize,
    /// CER-D scale on the generator loss.
    pub adv_weight: f64,
    /// CER-D discriminator learning rate.
    pub disc_lr: f64,
}

impl Default for VariantConfig {
    fn default() -> Self {
        VariantConfig {
            variant: Variant::Cer,
            disc_width: DEFAULT_DISC_WIDTH,
            adv_weight: 1.0,
            disc_lr: 1e-3,
        }
    }
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        VariantConfig {
            variant,
            ..Self::default()
        }
    }
}

/// `noise.*` keys.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseConfig {
    pub src_strategy: Strategy,
    pub sigma_x: f64,
    pub sigma_y: f64,
    pub m: usize,
    pub gaussian_std: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            src_strategy: Strategy::Madeup,
            sigma_x: DEFAULT_RATE,
            sigma_y: DEFAULT_RATE,
            m: DEFAULT_NEIGHBORS,
            gaussian_std: DEFAULT_GAUSSIAN_STD,
        }
    }
}

impl NoiseConfig {
    pub fn off() -> Self {
        NoiseConfig {
            sigma_x: 0.0,
            sigma_y: 0.0,
            ..Self::default()
        }
    }

    pub fn source(&self) -> PerturbationSpec {
        PerturbationSpec {
            strategy: self.src_strategy,
            rate: self.sigma_x,
            m: self.m,
            gaussian_std: self.gaussian_std,
        }
    }

    /// Decoder inputs always get the semantic perturbation.
    pub fn target(&self) -> PerturbationSpec {
        PerturbationSpec {
            strategy: Strategy::Semantics,
            rate: self.sigma_y,
            m: self.m,
            gaussian_std: self.gaussian_std,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: u64,
    /// Padded source + target tokens per batch.
    pub batch_tokens: usize,
    pub seed: u64,
    /// Real-word cap for vocabularies built from the corpus, specials included.
    pub max_vocab: usize,
    pub madeup: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_tokens: 2048,
            seed: 1,
            max_vocab: 32_000,
            madeup: crate::corpus::DEFAULT_MADEUP,
        }
    }
}

/// Everything a training run needs; the on-disk config file.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub noise: NoiseConfig,
    pub train: TrainConfig,
    pub optim: AdamConfig,
    pub variant: VariantConfig,
}

/// Component losses of one step. `total` is exactly
/// `0 + 1·l_nmt + λ_x·l_nal_x + λ_y·l_nal_y` evaluated left to right in the
/// training precision; the other fields are that precision's values widened.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_nmt: f64,
    pub l_nal_x: f64,
    pub l_nal_y: f64,
    pub total: f64,
    pub lambda_x: f64,
    pub lambda_y: f64,
    /// Non-pad decoder positions scored by `l_nmt` and `l_nal_y`.
    pub tgt_tokens: usize,
    /// Non-pad source positions scored by `l_nal_x`.
    pub src_tokens: usize,
}

impl LossBreakdown {
    /// Recombines the components in precision `T`.
    pub fn recombine<T: Float>(&self) -> f64 {
        let c = T::from_f64_lossy;
        let mut acc = T::zero();
        acc += T::one() * c(self.l_nmt);
        acc += c(self.lambda_x) * c(self.l_nal_x);
        acc += c(self.lambda_y) * c(self.l_nal_y);
        acc.to_f64_lossy()
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: u64,
    pub l_nmt: f64,
    pub l_nal_x: f64,
    pub l_nal_y: f64,
    pub total: f64,
    pub lr: f64,
    pub tokens: usize,
}
