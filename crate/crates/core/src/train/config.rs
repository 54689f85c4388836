use serde::{Deserialize, Serialize};

use crate::data::MixStrategy;
use crate::error::{Error, Result};

/// Optimisation settings for one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub warmup_steps: u64,
    /// Upper bound on `rows × padded length` per batch.
    pub batch_tokens: usize,
    pub dropout: f64,
    /// Stop after this many optimizer steps.
    #[serde(default)]
    pub max_steps: Option<u64>,
    /// Stop after this many passes over the data (summed over domains).
    #[serde(default)]
    pub epochs: Option<u64>,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; `None` disables clipping.
    #[serde(default = "default_clip")]
    pub grad_clip: Option<f64>,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub mixing: MixStrategy,
    #[serde(default = "default_log_every")]
    pub log_every: u64,
}

fn default_clip() -> Option<f64> {
    Some(1.0)
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.98
}
fn default_eps() -> f64 {
    1e-8
}
fn default_log_every() -> u64 {
    100
}

impl TrainConfig {
    fn base(learning_rate: f64, warmup_steps: u64, dropout: f64) -> Self {
        Self {
            learning_rate,
            warmup_steps,
            batch_tokens: 4096,
            dropout,
            max_steps: None,
            epochs: Some(1),
            seed: 0,
            grad_clip: default_clip(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            mixing: MixStrategy::RoundRobin,
            log_every: default_log_every(),
        }
    }

    /// Full-model pretraining on general data (desk-scale warmup).
    pub fn pretrain() -> Self {
        Self::base(5e-4, 200, 0.1)
    }

    /// Per-domain fine-tuning, also used for the mask-creation runs.
    pub fn finetune() -> Self {
        Self::base(1e-4, 50, 0.3)
    }

    /// Structure-aware joint training.
    pub fn doss() -> Self {
        Self::base(1e-4, 50, 0.1)
    }

    /// The same three stages with the warmup used for full-size corpora.
    pub fn full_scale(mut self) -> Self {
        self.warmup_steps = if self.learning_rate >= 5e-4 { 4000 } else { 1000 };
        self
    }

    pub fn with_steps(mut self, steps: u64) -> Self {
        self.max_steps = Some(steps);
        self.epochs = None;
        self
    }

    pub fn with_epochs(mut self, epochs: u64) -> Self {
        self.epochs = Some(epochs);
        self.max_steps = None;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if self.warmup_steps == 0 {
            return bad("warmup_steps must be at least 1");
        }
        if self.batch_tokens == 0 {
            return bad("batch_tokens must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        if self.max_steps.is_none() && self.epochs.is_none() {
            return bad("set max_steps or epochs");
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return bad("grad_clip must be positive");
            }
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0) {
            return bad("invalid Adam hyper-parameters");
        }
        Ok(())
    }
}
