//! Model hyperparameters and the two standard profiles.

use crate::error::{CoreError, Result};
use serde::{Deserialize, Serialize};

/// Hyperparameters of the multi-frame ordering head.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Feature width D of every proposal vector.
    pub feat_dim: usize,
    /// Encoder depth L.
    pub layers: usize,
    /// Attention heads; must divide `feat_dim`.
    pub heads: usize,
    /// Feed-forward hidden width.
    pub ff_dim: usize,
    /// Proposals per frame P.
    pub proposals: usize,
    /// Frames per training sample N.
    pub seq_len: usize,
    /// Ranking-loss margin.
    pub margin: f64,
    /// Add a learned per-frame-index embedding to the encoder input.
    /// Off by default: temporal structure then enters only through the
    /// attention mask and within-frame permutation symmetry is exact.
    pub use_frame_embedding: bool,
    /// When scoring transitions in the loss, drop competitors already
    /// consumed by the conditioning prefix. Off keeps the candidate
    /// pool identical on every row.
    pub exclude_used: bool,
}

impl ModelConfig {
    /// Laptop-scale profile used by the synthetic pipeline.
    pub fn desk() -> Self {
        ModelConfig {
            feat_dim: 32,
            layers: 2,
            heads: 4,
            ff_dim: 128,
            proposals: 8,
            seq_len: 4,
            margin: 0.1,
            use_frame_embedding: false,
            exclude_used: false,
        }
    }

    /// Full-scale profile used for parameter/FLOP accounting.
    pub fn paper() -> Self {
        ModelConfig {
            feat_dim: 256,
            layers: 2,
            heads: 8,
            ff_dim: 1536,
            proposals: 100,
            seq_len: 8,
            margin: 0.1,
            use_frame_embedding: false,
            exclude_used: false,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.feat_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("feat_dim", self.feat_dim),
            ("heads", self.heads),
            ("ff_dim", self.ff_dim),
            ("proposals", self.proposals),
            ("seq_len", self.seq_len),
        ] {
            if v == 0 {
                return Err(CoreError::contract(format!("{name} must be >= 1")));
            }
        }
        if !self.feat_dim.is_multiple_of(self.heads) {
            return Err(CoreError::contract(format!(
                "feat_dim {} not divisible by heads {}",
                self.feat_dim, self.heads
            )));
        }
        if !(self.margin.is_finite() && self.margin >= 0.0) {
            return Err(CoreError::contract(format!("margin must be >= 0, got {}", self.margin)));
        }
        Ok(())
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::desk()
    }
}
