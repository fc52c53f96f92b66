//! Ordering and retrieval evaluation.

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::head::{
    brute_force_order, greedy_order, retrieval_similarity, retrieval_similarity_encoded,
    sample_loss, ProposalSet, SequenceSample,
};
use crate::params::ParameterStore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Rank correlation between two orderings of the same item set:
/// (concordant - discordant) / C(n, 2). Single-item orderings count
/// as perfect agreement.
pub fn kendall_tau(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(CoreError::contract(format!(
            "kendall_tau length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let n = pred.len();
    let mut pred_rank = vec![usize::MAX; n];
    let mut truth_rank = vec![usize::MAX; n];
    for (rank, (&p, &t)) in pred.iter().zip(truth).enumerate() {
        if p >= n || t >= n || pred_rank[p] != usize::MAX || truth_rank[t] != usize::MAX {
            return Err(CoreError::contract("kendall_tau inputs must be permutations of 0..n"));
        }
        pred_rank[p] = rank;
        truth_rank[t] = rank;
    }
    if n < 2 {
        return Ok(1.0);
    }
    let mut concordant = 0i64;
    let mut discordant = 0i64;
    for a in 0..n {
        for b in a + 1..n {
            let dp = pred_rank[a] as i64 - pred_rank[b] as i64;
            let dt = truth_rank[a] as i64 - truth_rank[b] as i64;
            if dp * dt > 0 {
                concordant += 1;
            } else {
                discordant += 1;
            }
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok((concordant - discordant) as f64 / pairs)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerLengthStats {
    pub n: usize,
    pub samples: usize,
    pub exact_match: f64,
    pub kendall_tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrderingReport {
    pub exact_match: f64,
    pub mean_kendall_tau: f64,
    pub mean_loss: f64,
    pub per_n: Vec<PerLengthStats>,
    /// Fraction of samples where greedy and exhaustive decoding return
    /// the same full permutation; only computed on request and only
    /// defined for N <= 6 candidates + anchor.
    pub greedy_bruteforce_agreement: Option<f64>,
}

/// Decode every sample greedily and compare against ground truth.
pub fn evaluate_ordering(
    samples: &[SequenceSample],
    store: &ParameterStore,
    cfg: &ModelConfig,
    with_bruteforce: bool,
) -> Result<OrderingReport> {
    if samples.is_empty() {
        return Err(CoreError::contract("evaluate_ordering needs samples"));
    }
    struct PerSample {
        n: usize,
        exact: bool,
        tau: f64,
        loss: f64,
        agree: Option<bool>,
    }

    let rows: Vec<PerSample> = samples
        .par_iter()
        .map(|s| -> Result<PerSample> {
            let pred = greedy_order(s.anchor(), s.candidates(), store, cfg)?;
            let truth = s.true_candidate_order();
            let tau = kendall_tau(&pred, &truth)?;
            let loss = sample_loss(s, store, cfg)?;
            let agree = if with_bruteforce && s.seq_len() <= 6 {
                let (bf, _) = brute_force_order(s.anchor(), s.candidates(), store, cfg)?;
                Some(bf == pred)
            } else {
                None
            };
            Ok(PerSample {
                n: s.seq_len(),
                exact: pred == truth,
                tau,
                loss,
                agree,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let count = rows.len() as f64;
    let exact_match = rows.iter().filter(|r| r.exact).count() as f64 / count;
    let mean_kendall_tau = rows.iter().map(|r| r.tau).sum::<f64>() / count;
    let mean_loss = rows.iter().map(|r| r.loss).sum::<f64>() / count;

    let mut per_n: Vec<PerLengthStats> = Vec::new();
    let mut lengths: Vec<usize> = rows.iter().map(|r| r.n).collect();
    lengths.sort_unstable();
    lengths.dedup();
    for n in lengths {
        let group: Vec<&PerSample> = rows.iter().filter(|r| r.n == n).collect();
        per_n.push(PerLengthStats {
            n,
            samples: group.len(),
            exact_match: group.iter().filter(|r| r.exact).count() as f64 / group.len() as f64,
            kendall_tau: group.iter().map(|r| r.tau).sum::<f64>() / group.len() as f64,
        });
    }

    let agreements: Vec<bool> = rows.iter().filter_map(|r| r.agree).collect();
    let greedy_bruteforce_agreement = if agreements.is_empty() {
        None
    } else {
        Some(agreements.iter().filter(|&&a| a).count() as f64 / agreements.len() as f64)
    };

    Ok(OrderingReport {
        exact_match,
        mean_kendall_tau,
        mean_loss,
        per_n,
        greedy_bruteforce_agreement,
    })
}

/// Top-k retrieval accuracy over a labeled frame pool: the fraction of
/// queries whose label appears among the k most similar other frames.
/// Self-matches are excluded; similarity ties break toward the lower
/// frame tag.
pub fn retrieval_topk(
    pool: &[(ProposalSet, u64)],
    k: usize,
    store: &ParameterStore,
    encoded: Option<&ModelConfig>,
) -> Result<f64> {
    if k == 0 {
        return Err(CoreError::contract("k must be >= 1"));
    }
    if pool.len() < k + 1 {
        return Err(CoreError::contract(format!(
            "pool of {} cannot answer top-{k} queries",
            pool.len()
        )));
    }
    let hits: Vec<bool> = (0..pool.len())
        .into_par_iter()
        .map(|q| -> Result<bool> {
            let mut scored: Vec<(f64, u64, usize)> = Vec::with_capacity(pool.len() - 1);
            for (j, (frame, _)) in pool.iter().enumerate() {
                if j == q {
                    continue;
                }
                let sim = match encoded {
                    Some(cfg) => retrieval_similarity_encoded(&pool[q].0, frame, store, cfg)?,
                    None => retrieval_similarity(&pool[q].0, frame, store)?,
                };
                scored.push((sim, frame.frame_tag, j));
            }
            scored.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal).then(a.1.cmp(&b.1)));
            Ok(scored.iter().take(k).any(|&(_, _, j)| pool[j].1 == pool[q].1))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
}
