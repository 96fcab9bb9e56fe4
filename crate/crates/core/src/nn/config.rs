use serde::{Deserialize, Serialize};

use super::NnError;
use crate::text::MAX_TEXT_LEN;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    /// Music encoder depth.
    pub encoder_layers: usize,
    pub text_layers: usize,
    /// Character decoder depth (M3 only).
    pub decoder_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_patches: usize,
    pub max_text_len: usize,
    pub dropout: f64,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ModelConfig {
    /// Small configuration that trains on one CPU core.
    pub fn desk() -> Self {
        Self {
            hidden_dim: 128,
            encoder_layers: 2,
            text_layers: 2,
            decoder_layers: 1,
            heads: 4,
            ffn_mult: 4,
            max_patches: 512,
            max_text_len: MAX_TEXT_LEN,
            dropout: 0.1,
            init_std: 0.02,
        }
    }

    /// Published model shape (768 wide, 6 encoder and 3 decoder layers).
    pub fn full_size(max_patches: usize) -> Self {
        Self {
            hidden_dim: 768,
            encoder_layers: 6,
            text_layers: 6,
            decoder_layers: 3,
            heads: 12,
            max_patches,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<(), NnError> {
        let bad = |msg: &str| Err(NnError::Config(msg.to_string()));
        if self.hidden_dim == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad("hidden_dim, heads and ffn_mult must be at least 1");
        }
        if self.hidden_dim % self.heads != 0 {
            return bad("hidden_dim must be divisible by heads");
        }
        if self.max_patches == 0 || self.max_text_len == 0 {
            return bad("maximum lengths must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        if !(self.init_std.is_finite() && self.init_std > 0.0) {
            return bad("init_std must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub epochs: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            epochs: 20,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        let open = |b: f64| b > 0.0 && b < 1.0;
        if !open(self.beta1) || !open(self.beta2) {
            return Err(NnError::Config("betas must lie in (0, 1)".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.eps > 0.0 && self.weight_decay >= 0.0) {
            return Err(NnError::Config("lr, eps and weight_decay must be non-negative".into()));
        }
        Ok(())
    }
}
