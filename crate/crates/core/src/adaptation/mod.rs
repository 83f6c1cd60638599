//! Unsupervised adaptation of the text side: objectives, optimizer, the
//! training loop and the checkpoint it produces.

mod adam;
mod checkpoint;
mod loss;
mod train;

pub use adam::{adam_step, AdamParams, AdamState};
pub use checkpoint::{AdapterCheckpoint, CheckpointMeta, EncoderSpec, Tensor, TensorSpec, CHECKPOINT_MAGIC, META_FILE};
pub use loss::{
    class_probabilities, entropy, softmax_backward, softmax_in_place, ueo_loss, upl_cross_entropy, BatchPrediction,
    LossGrad, WEIGHT_FLOOR,
};
pub use train::{
    effective_classes, identity_residual, make_batches, random_word_negatives, residual_features, train, Evaluation,
    Objective,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Ueo,
    UplCe,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeSource {
    Captions,
    RandomWords,
}

/// What the optimizer updates: the prompt context, or an affine map applied
/// to fixed class features.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterMode {
    Prompt,
    Residual,
}

/// Only Adam is implemented; the field records the choice in configs and
/// checkpoints.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: Optimizer,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub tau: f64,
    pub k: usize,
    pub n_negatives: usize,
    pub m_context: usize,
    pub loss_kind: LossKind,
    pub use_negatives: bool,
    pub use_topk: bool,
    pub negative_source: NegativeSource,
    pub seed: u64,
    pub detach_weights: bool,
    pub mode: AdapterMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Adam,
            epochs: 50,
            batch_size: 256,
            learning_rate: 0.0005,
            tau: 0.01,
            k: 8,
            n_negatives: 100,
            m_context: 4,
            loss_kind: LossKind::Ueo,
            use_negatives: true,
            use_topk: true,
            negative_source: NegativeSource::Captions,
            seed: 42,
            detach_weights: false,
            mode: AdapterMode::Prompt,
        }
    }
}

impl TrainConfig {
    /// Zero epochs is accepted: it yields the initial checkpoint.
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return fail("tau must be positive");
        }
        if !(self.learning_rate >= 0.0) || !self.learning_rate.is_finite() {
            return fail("learning_rate must be non-negative");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.loss_kind == LossKind::Ueo && self.batch_size < 2 {
            return fail("batch_size must be at least 2 for the entropy objective");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if self.m_context == 0 {
            return fail("m_context must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let bad = |f: fn(&mut TrainConfig)| {
            let mut c = TrainConfig::default();
            f(&mut c);
            c.validate().is_err()
        };
        assert!(bad(|c| c.tau = 0.0));
        assert!(bad(|c| c.batch_size = 1));
        assert!(bad(|c| c.k = 0));
        assert!(bad(|c| c.m_context = 0));
        assert!(!bad(|c| c.epochs = 0));
        assert!(!bad(|c| {
            c.batch_size = 1;
            c.loss_kind = LossKind::UplCe;
        }));
    }
}
