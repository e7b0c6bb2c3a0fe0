//! Run configuration: every stage's hyper-parameters in one serializable
//! struct, loadable from a TOML file with field-path overrides.

use serde::{Deserialize, Serialize};

use crate::benchmark::BenchSpec;
use crate::contrastive::ContrastNorm;
use crate::embed::{KGTrainConfig, Optimizer};
use crate::question::Activation;

/// Encoder dimensions and activation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_enc: usize,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            d_enc: 64,
            activation: Activation::Relu,
        }
    }
}

/// Hyper-parameters of the QA training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QaTrainConfig {
    pub lr: f64,
    /// Final-epoch learning-rate fraction; lr decays exponentially from
    /// `lr` to `lr * lr_decay` across epochs (1.0 = constant).
    pub lr_decay: f64,
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the contrastive order loss.
    pub lambda_o: f64,
    /// Weight of the answer-guided contrastive loss.
    pub lambda_c: f64,
    /// Hop cap for training-time candidate extraction.
    pub m_max: usize,
    pub seed: u64,
    /// Renormalize multi-hot answer labels to sum to one.
    pub gold_norm: bool,
    pub contrast_norm: ContrastNorm,
    /// Unfreeze KG embeddings during QA training.
    pub finetune_kg: bool,
    /// Learn per-block (entity/timestamp) score offsets.
    pub block_bias: bool,
    /// Dev-set evaluation cadence in epochs (model selection).
    pub eval_every: usize,
}

impl Default for QaTrainConfig {
    fn default() -> Self {
        QaTrainConfig {
            lr: 0.02,
            lr_decay: 0.1,
            optimizer: Optimizer::Adam,
            epochs: 60,
            batch_size: 32,
            lambda_o: 1.0,
            lambda_c: 1.0,
            m_max: 3,
            seed: 44,
            gold_norm: false,
            contrast_norm: ContrastNorm::Paper,
            finetune_kg: false,
            block_bias: false,
            eval_every: 5,
        }
    }
}

/// The full run configuration. Paths stay outside: they are process-level
/// flags, so configs embedded in checkpoints and reports are identical
/// across working directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; see [`RunConfig::with_master_seed`].
    pub seed: u64,
    pub bench: BenchSpec,
    pub kg: KGTrainConfig,
    pub encoder: EncoderConfig,
    pub qa: QaTrainConfig,
}

impl RunConfig {
    /// Derive all stage seeds from one master seed.
    pub fn with_master_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.bench.seed = seed;
        self.kg.seed = seed.wrapping_add(1);
        self.qa.seed = seed.wrapping_add(2);
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back: RunConfig = toml::from_str(&text).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn master_seed_fans_out() {
        let cfg = RunConfig::default().with_master_seed(100);
        assert_eq!(cfg.seed, 100);
        assert_eq!(cfg.bench.seed, 100);
        assert_eq!(cfg.kg.seed, 101);
        assert_eq!(cfg.qa.seed, 102);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let cfg: RunConfig = toml::from_str("[qa]\nlambda_o = 2.0\n").unwrap();
        assert_eq!(cfg.qa.lambda_o, 2.0);
        assert_eq!(cfg.qa.lambda_c, RunConfig::default().qa.lambda_c);
        assert_eq!(cfg.kg, RunConfig::default().kg);
    }
}
