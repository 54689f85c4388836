use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Shape hyperparameters of the encoder–decoder transformer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub n_heads: usize,
    pub dropout: f64,
    pub max_len: usize,
    #[serde(default)]
    pub tie_embeddings: bool,
}

impl ModelConfig {
    /// Smallest useful configuration, mostly for tests.
    pub fn mini() -> Self {
        Self {
            vocab_size: 32,
            d_model: 32,
            ffn_dim: 64,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 2,
            dropout: 0.1,
            max_len: 64,
            tie_embeddings: false,
        }
    }

    /// Default size for the synthetic multi-domain experiments.
    pub fn desk() -> Self {
        Self {
            vocab_size: 24,
            d_model: 64,
            ffn_dim: 128,
            n_enc_layers: 2,
            n_dec_layers: 2,
            n_heads: 4,
            dropout: 0.1,
            max_len: 32,
            tie_embeddings: false,
        }
    }

    /// Big-transformer shape used for large-scale translation (6+6 layers,
    /// 1024 model dimension, 8192 feed-forward, 16 heads, 42k vocabulary).
    pub fn full() -> Self {
        Self {
            vocab_size: 42_000,
            d_model: 1024,
            ffn_dim: 8192,
            n_enc_layers: 6,
            n_dec_layers: 6,
            n_heads: 16,
            dropout: 0.1,
            max_len: 256,
            tie_embeddings: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        let extents = [
            ("vocab_size", self.vocab_size),
            ("d_model", self.d_model),
            ("ffn_dim", self.ffn_dim),
            ("n_enc_layers", self.n_enc_layers),
            ("n_dec_layers", self.n_dec_layers),
            ("n_heads", self.n_heads),
            ("max_len", self.max_len),
        ];
        if let Some((name, _)) = extents.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} must be in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for c in [ModelConfig::mini(), ModelConfig::desk(), ModelConfig::full()] {
            c.validate().unwrap();
        }
    }

    #[test]
    fn rejects_bad_heads_and_zero_extents() {
        let mut c = ModelConfig::mini();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::mini();
        c.n_dec_layers = 0;
        assert!(c.validate().is_err());
    }
}
