//! Greedy and beam decoding, corpus BLEU, and robustness curves under
//! test-time source noise.

mod bleu;
mod decode;
mod robust;

pub use bleu::{bleu, bleu_single, BleuStats, BLEU_EPSILON, MAX_ORDER};
pub use decode::{
    decode, decode_all, decode_hypotheses, sequence_log_prob, DecodeConfig, Hypothesis, Method,
    DECODE_BATCH,
};
pub use robust::{
    evaluate_bleu, perturb_sources, robustness_eval, NoisySources, RobustnessConfig,
    RobustnessRecord, RobustnessReport, SummaryRow, System, TestSet, DEFAULT_RATES, DEFAULT_SEEDS,
};
