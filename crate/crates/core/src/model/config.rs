use serde::{Deserialize, Serialize};

use crate::alignment::AlignMode;
use crate::error::{MatrError, Result};

/// Network hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Raw per-frame feature width.
    pub input_dim: usize,
    /// Hidden width.
    pub d: usize,
    /// Encoder and decoder depth.
    pub k: usize,
    /// Number of learnable moment queries.
    pub l: usize,
    pub heads: usize,
    /// Feed-forward expansion factor.
    pub ffn_mult: usize,
    pub dropout_transformer: f64,
    pub dropout_projection: f64,
    /// Soft-min smoothing of both alignment stages.
    pub gamma: f64,
    pub align_mode: AlignMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            input_dim: 512,
            d: 64,
            k: 2,
            l: 10,
            heads: 4,
            ffn_mult: 4,
            dropout_transformer: 0.1,
            dropout_projection: 0.5,
            gamma: 0.1,
            align_mode: AlignMode::Subsequence,
        }
    }
}

impl ModelConfig {
    /// Full-size settings (1024 hidden, 4 layers).
    pub fn paper_scale() -> Self {
        ModelConfig {
            d: 1024,
            k: 4,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(MatrError::InvalidArgument(msg));
        if self.input_dim == 0 || self.d == 0 || self.l == 0 || self.heads == 0 || self.ffn_mult == 0 {
            return bad(format!("model dimensions must be positive: {self:?}"));
        }
        if self.d % self.heads != 0 {
            return bad(format!("d = {} not divisible by heads = {}", self.d, self.heads));
        }
        if self.d % 2 != 0 {
            return bad(format!("d = {} must be even for sinusoidal positions", self.d));
        }
        for p in [self.dropout_transformer, self.dropout_projection] {
            if !(0.0..1.0).contains(&p) {
                return bad(format!("dropout {p} outside [0, 1)"));
            }
        }
        if !(self.gamma > 0.0) {
            return bad(format!("gamma must be positive, got {}", self.gamma));
        }
        Ok(())
    }
}
