//! Exact parameter and FLOP accounting for the multi-frame head.
//!
//! Conventions, fixed here and used everywhere:
//! - one multiply-accumulate = 2 FLOPs,
//! - softmax, layer norm and pointwise nonlinearities = 5 FLOPs per
//!   element,
//! - plain adds/multiplies (biases, residuals, scaling) = 1 FLOP per
//!   element.
//!
//! Counts cover the multi-frame network only: the encoder over N*P
//! tokens, additive attention over N^2 frame pairs, and the score
//! reduction.

use crate::config::ModelConfig;
use serde::Serialize;

/// 2 * tokens * d_in * d_out: the matmul cost of one linear layer
/// applied to `tokens` rows, excluding the bias add.
pub fn linear_flops(tokens: u64, d_in: u64, d_out: u64) -> u64 {
    2 * tokens * d_in * d_out
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ParamCounts {
    pub encoder_per_layer: u64,
    pub encoder: u64,
    pub additive_attention: u64,
    pub frame_embedding: u64,
    pub total: u64,
}

/// Closed-form parameter counts for `cfg`. Matches
/// [`crate::params::ParameterStore::num_scalars`] exactly.
pub fn count_params(cfg: &ModelConfig) -> ParamCounts {
    let d = cfg.feat_dim as u64;
    let ff = cfg.ff_dim as u64;
    // attention: 4 projections with bias; norms: 2 * (gamma + beta);
    // ffn: two biased linears.
    let encoder_per_layer = 4 * (d * d + d) + 2 * (2 * d) + (d * ff + ff) + (ff * d + d);
    let encoder = cfg.layers as u64 * encoder_per_layer;
    let additive_attention = 2 * d * d + d;
    let frame_embedding = if cfg.use_frame_embedding {
        cfg.seq_len as u64 * d
    } else {
        0
    };
    ParamCounts {
        encoder_per_layer,
        encoder,
        additive_attention,
        frame_embedding,
        total: encoder + additive_attention + frame_embedding,
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct FlopCounts {
    pub encoder: u64,
    pub additive_attention: u64,
    pub reduction: u64,
    pub total: u64,
}

/// FLOPs for one forward pass of the multi-frame head over an
/// `n`-frame sequence.
pub fn count_flops(cfg: &ModelConfig, n: usize) -> FlopCounts {
    let d = cfg.feat_dim as u64;
    let ff = cfg.ff_dim as u64;
    let p = cfg.proposals as u64;
    let heads = cfg.heads as u64;
    let n = n as u64;
    let t = n * p;

    let norms = 2 * (5 * t * d + 2 * t * d); // normalize + affine, twice
    let projections = 4 * (linear_flops(t, d, d) + t * d); // q, k, v, out with bias
    let logits = 2 * t * t * d; // per-head t^2 * head_dim MACs, summed over heads
    let scale_and_softmax = heads * t * t + 5 * heads * t * t;
    let weighted_sum = 2 * t * t * d;
    let ffn = linear_flops(t, d, ff) + t * ff + 5 * t * ff + linear_flops(t, ff, d) + t * d;
    let residuals = 2 * t * d;
    let per_layer = norms + projections + logits + scale_and_softmax + weighted_sum + ffn + residuals;
    let mut encoder = cfg.layers as u64 * per_layer;
    if cfg.use_frame_embedding {
        encoder += t * d;
    }

    // Both score projections once per token, then the pairwise combine:
    // add (1) + tanh (5) + dot MAC (2) per coordinate of each of the
    // n^2 * p^2 score entries.
    let additive_attention = 2 * linear_flops(t, d, d) + n * n * p * p * d * 8;
    let reduction = n * n * (p * p + 1);

    FlopCounts {
        encoder,
        additive_attention,
        reduction,
        total: encoder + additive_attention + reduction,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParameterStore;

    #[test]
    fn linear_flops_hand_case() {
        assert_eq!(linear_flops(2, 4, 3), 48);
    }

    #[test]
    fn additive_attention_params_at_width_256() {
        let cfg = ModelConfig::paper();
        assert_eq!(count_params(&cfg).additive_attention, 131_328);
    }

    #[test]
    fn encoder_params_linear_in_depth() {
        let mut one = ModelConfig::paper();
        one.layers = 1;
        let mut two = ModelConfig::paper();
        two.layers = 2;
        let c1 = count_params(&one);
        let c2 = count_params(&two);
        assert_eq!(c2.encoder, 2 * c1.encoder);
        assert_eq!(c1.encoder, c1.encoder_per_layer);
    }

    #[test]
    fn paper_profile_total_near_reference() {
        let total = count_params(&ModelConfig::paper()).total as f64;
        assert!((total / 2.24e6 - 1.0).abs() <= 0.10, "total {total}");
    }

    #[test]
    fn counts_match_actual_store() {
        for cfg in [ModelConfig::desk(), ModelConfig::paper(), {
            let mut c = ModelConfig::desk();
            c.use_frame_embedding = true;
            c.layers = 3;
            c
        }] {
            let store = ParameterStore::init(&cfg, 0).unwrap();
            assert_eq!(count_params(&cfg).total, store.num_scalars(), "cfg {cfg:?}");
        }
    }

    #[test]
    fn flops_monotone_in_sequence_length() {
        let cfg = ModelConfig::paper();
        let mut last = 0;
        for n in 1..=16 {
            let f = count_flops(&cfg, n).total;
            assert!(f > last);
            last = f;
        }
    }

    #[test]
    fn encoder_flops_linear_in_depth() {
        let mut a = ModelConfig::paper();
        a.layers = 2;
        let mut b = ModelConfig::paper();
        b.layers = 4;
        assert_eq!(2 * count_flops(&a, 8).encoder, count_flops(&b, 8).encoder);
    }

    #[test]
    fn paper_profile_ratio_is_subquadratic() {
        let cfg = ModelConfig::paper();
        let r = count_flops(&cfg, 8).total as f64 / count_flops(&cfg, 4).total as f64;
        assert!(r < 4.0, "ratio {r}");
        assert!((r / 2.61 - 1.0).abs() <= 0.30, "ratio {r} vs reference 2.61");
    }
}
