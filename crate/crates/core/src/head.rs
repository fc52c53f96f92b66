//! The multi-frame ordering head: future-frame attention masking,
//! history tokens, frame-transition scores, the margin ranking loss,
//! and the greedy / exhaustive ordering decoders.
//!
//! A sample holds an anchor frame (always the chronologically first)
//! plus shuffled candidate frames. History tokens for a prefix are
//! encoder outputs at the prefix's last frame positions; a transition
//! score for a candidate is the mean over all pairwise additive
//! attention scores between history tokens and the candidate's raw
//! proposal features.

use crate::blocks::{additive_attention, encoder_forward};
use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::params::{BoundParams, ParameterStore};
use crate::tape::{NodeId, TapeGraph};
use crate::tensor::Tensor;

/// One frame's unordered set of proposal feature vectors (P x D).
/// Nothing downstream may depend on row order; `frame_tag` is an
/// opaque id used only for deterministic tie-breaking.
#[derive(Clone, Debug, PartialEq)]
pub struct ProposalSet {
    pub features: Tensor,
    pub frame_tag: u64,
}

impl ProposalSet {
    pub fn new(features: Tensor, frame_tag: u64) -> Result<Self> {
        if features.rank() != 2 {
            return Err(CoreError::contract(format!(
                "proposal features must be P x D, got {:?}",
                features.shape()
            )));
        }
        Ok(ProposalSet { features, frame_tag })
    }

    pub fn proposals(&self) -> usize {
        self.features.rows()
    }

    pub fn width(&self) -> usize {
        self.features.cols()
    }
}

/// A training sample: frames in presented order (index 0 is the
/// anchor), plus the ground-truth chronology.
///
/// `true_order[k]` is the presented index of the k-th chronological
/// frame; `true_order[0] == 0` because the anchor is always first in
/// time. `shuffle[i]` is the chronological rank (1-based among the
/// candidates) of presented candidate i.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceSample {
    pub frames: Vec<ProposalSet>,
    pub true_order: Vec<usize>,
    pub shuffle: Vec<usize>,
}

impl SequenceSample {
    pub fn new(frames: Vec<ProposalSet>, true_order: Vec<usize>) -> Result<Self> {
        let n = frames.len();
        if n < 2 {
            return Err(CoreError::contract("a sample needs at least 2 frames"));
        }
        if true_order.len() != n {
            return Err(CoreError::contract(format!(
                "true_order length {} != frame count {n}",
                true_order.len()
            )));
        }
        let mut seen = vec![false; n];
        for &idx in &true_order {
            if idx >= n || seen[idx] {
                return Err(CoreError::contract("true_order must be a permutation"));
            }
            seen[idx] = true;
        }
        if true_order[0] != 0 {
            return Err(CoreError::contract("presented frame 0 must be the anchor"));
        }
        // shuffle[i]: chronological rank of presented candidate i+1
        let mut shuffle = vec![0usize; n - 1];
        for (rank, &presented) in true_order.iter().enumerate().skip(1) {
            shuffle[presented - 1] = rank;
        }
        Ok(SequenceSample {
            frames,
            true_order,
            shuffle,
        })
    }

    pub fn seq_len(&self) -> usize {
        self.frames.len()
    }

    pub fn anchor(&self) -> &ProposalSet {
        &self.frames[0]
    }

    /// Candidate frames in presented order (everything but the anchor).
    pub fn candidates(&self) -> &[ProposalSet] {
        &self.frames[1..]
    }

    /// Frames in chronological order.
    pub fn chronological(&self) -> Vec<&ProposalSet> {
        self.true_order.iter().map(|&i| &self.frames[i]).collect()
    }

    /// Ground-truth decoding target: candidate indices (into
    /// `candidates()`) in chronological order.
    pub fn true_candidate_order(&self) -> Vec<usize> {
        self.true_order.iter().skip(1).map(|&i| i - 1).collect()
    }
}

/// Per-prefix encoder outputs: `blocks[k]` is the P x D history block
/// H_{k+1}, a function of frames 1..=k+1 only.
#[derive(Clone, Debug)]
pub struct HistoryTokens {
    pub blocks: Vec<Tensor>,
}

/// Transition scores for a sample. Row r holds scores conditioned on
/// the true prefix of length r+1; column c scores the candidate whose
/// chronological rank is c+1. The correct candidate for row r is
/// column r, so a well-trained table is diagonal-dominant. Every row
/// scores the same candidate pool.
#[derive(Clone, Debug, PartialEq)]
pub struct TransitionTable {
    pub rho: Vec<Vec<f64>>,
}

impl TransitionTable {
    pub fn new(rho: Vec<Vec<f64>>) -> Result<Self> {
        let n = rho.len();
        for row in &rho {
            if row.len() != n {
                return Err(CoreError::contract("transition table must be square"));
            }
            if !row.iter().all(|v| v.is_finite()) {
                return Err(CoreError::numerics("transition table"));
            }
        }
        Ok(TransitionTable { rho })
    }

    /// Number of transitions = number of candidates = N - 1.
    pub fn len(&self) -> usize {
        self.rho.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rho.is_empty()
    }
}

/// Graph-level transition table: same layout, node handles.
pub struct TableNodes {
    pub rho: Vec<Vec<NodeId>>,
}

/// Block lower-triangular frame visibility: token of frame a may
/// attend to token of frame b iff b <= a, with full P x P blocks.
pub fn build_frame_mask(n: usize, p: usize) -> Tensor {
    let t = n * p;
    let mut data = vec![0.0; t * t];
    for a in 0..n {
        for b in 0..=a {
            for i in 0..p {
                for j in 0..p {
                    data[(a * p + i) * t + (b * p + j)] = 1.0;
                }
            }
        }
    }
    Tensor::new(vec![t, t], data).expect("mask construction")
}

/// Run the masked encoder over `frames` (already in chronological
/// prefix order) and return one history block per prefix length.
/// A single encoder pass yields all prefixes: the future-frame mask
/// makes block k depend on frames 0..=k only.
pub fn history_tokens_nodes(
    g: &mut TapeGraph,
    frames: &[NodeId],
    p: &BoundParams,
    cfg: &ModelConfig,
) -> Result<Vec<NodeId>> {
    if frames.is_empty() {
        return Err(CoreError::contract("history needs at least one frame"));
    }
    let n = frames.len();
    let tokens = g.concat_rows(frames)?;
    let rows = g.value(tokens).rows();
    if rows != n * cfg.proposals {
        return Err(CoreError::contract(format!(
            "expected {n} frames of {} proposals, got {rows} rows",
            cfg.proposals
        )));
    }
    let mask = build_frame_mask(n, cfg.proposals);
    let encoded = encoder_forward(g, tokens, &mask, p, cfg)?;
    (0..n)
        .map(|k| g.slice_rows(encoded, k * cfg.proposals, (k + 1) * cfg.proposals))
        .collect()
}

/// Value-level convenience: history blocks for the ground-truth-ordered
/// frames of `sample` (teacher forcing), prefixes 1..N-1.
pub fn history_tokens(sample: &SequenceSample, store: &ParameterStore, cfg: &ModelConfig) -> Result<HistoryTokens> {
    let mut g = TapeGraph::new();
    let p = store.bind(&mut g);
    let chrono = sample.chronological();
    let ids: Vec<NodeId> = chrono
        .iter()
        .take(sample.seq_len() - 1)
        .map(|f| g.leaf(f.features.clone()))
        .collect();
    let blocks = history_tokens_nodes(&mut g, &ids, &p, cfg)?;
    Ok(HistoryTokens {
        blocks: blocks.into_iter().map(|id| g.value(id).clone()).collect(),
    })
}

/// rho = mean over all P^2 additive-attention scores between a history
/// block and a candidate's raw features. Raw, unsquashed: the ranking
/// loss only ever uses differences of these.
pub fn transition_prob_node(g: &mut TapeGraph, history: NodeId, candidate: NodeId, p: &BoundParams) -> Result<NodeId> {
    let scores = additive_attention(g, history, candidate, p)?;
    g.mean_all(scores)
}

/// Value-level transition score between explicit tensors.
pub fn transition_prob(history: &Tensor, candidate: &Tensor, store: &ParameterStore) -> Result<f64> {
    let mut g = TapeGraph::new();
    let p = store.bind(&mut g);
    let h = g.leaf(history.clone());
    let c = g.leaf(candidate.clone());
    let rho = transition_prob_node(&mut g, h, c, &p)?;
    g.value(rho).item()
}

/// Build the full (N-1) x (N-1) table on the graph: one history pass
/// over the true prefix order plus one transition score per
/// (prefix, candidate) pair. Cost is dominated by the single encoder
/// pass, never by permutation enumeration.
pub fn transition_table_nodes(
    g: &mut TapeGraph,
    sample: &SequenceSample,
    p: &BoundParams,
    cfg: &ModelConfig,
) -> Result<TableNodes> {
    let n = sample.seq_len();
    let chrono = sample.chronological();
    let prefix_ids: Vec<NodeId> = chrono
        .iter()
        .take(n - 1)
        .map(|f| g.leaf(f.features.clone()))
        .collect();
    let history = history_tokens_nodes(g, &prefix_ids, p, cfg)?;

    // Candidates in chronological-rank order to match the row layout.
    let cand_ids: Vec<NodeId> = chrono
        .iter()
        .skip(1)
        .map(|f| g.leaf(f.features.clone()))
        .collect();

    let mut rho = Vec::with_capacity(n - 1);
    for h in &history {
        let row = cand_ids
            .iter()
            .map(|&c| transition_prob_node(g, *h, c, p))
            .collect::<Result<Vec<_>>>()?;
        rho.push(row);
    }
    Ok(TableNodes { rho })
}

/// Value-level transition table.
pub fn transition_table(sample: &SequenceSample, store: &ParameterStore, cfg: &ModelConfig) -> Result<TransitionTable> {
    let mut g = TapeGraph::new();
    let p = store.bind(&mut g);
    let nodes = transition_table_nodes(&mut g, sample, &p, cfg)?;
    let rho = nodes
        .rho
        .iter()
        .map(|row| row.iter().map(|&id| g.value(id).item()).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    TransitionTable::new(rho)
}

fn loss_pairs(n_cands: usize, exclude_used: bool) -> Vec<(usize, usize)> {
    let mut pairs = Vec::new();
    for r in 0..n_cands {
        for c in 0..n_cands {
            if c == r {
                continue;
            }
            // candidates with chronological rank <= r are already in
            // the row's conditioning prefix
            if exclude_used && c < r {
                continue;
            }
            pairs.push((r, c));
        }
    }
    pairs
}

/// Margin ranking loss over a transition table: for every prefix row,
/// hinge each competitor against the correct next frame, then average
/// over pairs so the margin stays comparable across sequence lengths.
pub fn tempo_loss(table: &TransitionTable, margin: f64, exclude_used: bool) -> Result<f64> {
    if margin < 0.0 {
        return Err(CoreError::contract("margin must be >= 0"));
    }
    let pairs = loss_pairs(table.len(), exclude_used);
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &(r, c) in &pairs {
        total += (table.rho[r][c] - table.rho[r][r] + margin).max(0.0);
    }
    Ok(total / pairs.len() as f64)
}

/// Graph version of [`tempo_loss`], differentiable end to end.
pub fn tempo_loss_node(g: &mut TapeGraph, table: &TableNodes, margin: f64, exclude_used: bool) -> Result<NodeId> {
    if margin < 0.0 {
        return Err(CoreError::contract("margin must be >= 0"));
    }
    let n = table.rho.len();
    let pairs = loss_pairs(n, exclude_used);
    if pairs.is_empty() {
        return Ok(g.leaf(Tensor::scalar(0.0)?));
    }
    let mut terms = Vec::with_capacity(pairs.len());
    for &(r, c) in &pairs {
        let diff = g.sub(table.rho[r][c], table.rho[r][r])?;
        let shifted = g.add_scalar(diff, margin)?;
        terms.push(g.relu(shifted)?);
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    g.scale(acc, 1.0 / pairs.len() as f64)
}

/// Full per-sample loss: transition table plus ranking loss, on one
/// graph.
pub fn sample_loss_node(g: &mut TapeGraph, sample: &SequenceSample, p: &BoundParams, cfg: &ModelConfig) -> Result<NodeId> {
    let table = transition_table_nodes(g, sample, p, cfg)?;
    tempo_loss_node(g, &table, cfg.margin, cfg.exclude_used)
}

/// Value-level per-sample loss.
pub fn sample_loss(sample: &SequenceSample, store: &ParameterStore, cfg: &ModelConfig) -> Result<f64> {
    let table = transition_table(sample, store, cfg)?;
    tempo_loss(&table, cfg.margin, cfg.exclude_used)
}

/// Score every remaining candidate against the decoded prefix.
fn score_candidates(
    prefix: &[&ProposalSet],
    remaining: &[usize],
    candidates: &[ProposalSet],
    store: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<Vec<f64>> {
    let mut g = TapeGraph::new();
    let p = store.bind(&mut g);
    let ids: Vec<NodeId> = prefix.iter().map(|f| g.leaf(f.features.clone())).collect();
    let history = history_tokens_nodes(&mut g, &ids, &p, cfg)?;
    let last = *history.last().expect("non-empty prefix");
    remaining
        .iter()
        .map(|&ci| {
            let c = g.leaf(candidates[ci].features.clone());
            let rho = transition_prob_node(&mut g, last, c, &p)?;
            g.value(rho).item()
        })
        .collect()
}

/// Greedy decoding: repeatedly append the candidate with the highest
/// transition score given the prefix decoded so far, recomputing
/// history tokens on that decoded prefix. Ties break toward the lowest
/// frame tag. Returns candidate indices in predicted chronological
/// order.
pub fn greedy_order(
    anchor: &ProposalSet,
    candidates: &[ProposalSet],
    store: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<Vec<usize>> {
    if candidates.is_empty() {
        return Err(CoreError::contract("greedy_order needs at least one candidate"));
    }
    let mut prefix: Vec<&ProposalSet> = vec![anchor];
    let mut remaining: Vec<usize> = (0..candidates.len()).collect();
    let mut decoded = Vec::with_capacity(candidates.len());

    while !remaining.is_empty() {
        let scores = score_candidates(&prefix, &remaining, candidates, store, cfg)?;
        let mut best = 0;
        for i in 1..remaining.len() {
            let better = scores[i] > scores[best]
                || (scores[i] == scores[best]
                    && candidates[remaining[i]].frame_tag < candidates[remaining[best]].frame_tag);
            if better {
                best = i;
            }
        }
        let chosen = remaining.remove(best);
        decoded.push(chosen);
        prefix.push(&candidates[chosen]);
    }
    Ok(decoded)
}

/// Total sequence score of one ordering: sum over positions of the
/// transition score of the frame placed there, conditioned on the
/// ordering's own decoded prefix.
pub fn sequence_score(
    order: &[usize],
    anchor: &ProposalSet,
    candidates: &[ProposalSet],
    store: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<f64> {
    let mut prefix: Vec<&ProposalSet> = vec![anchor];
    let mut total = 0.0;
    for &ci in order {
        let s = score_candidates(&prefix, &[ci], candidates, store, cfg)?;
        total += s[0];
        prefix.push(&candidates[ci]);
    }
    Ok(total)
}

const BRUTE_FORCE_MAX_FRAMES: usize = 7;

/// Exhaustive decoding: score all (N-1)! candidate orderings and
/// return the best with its score. Candidates are explored in
/// ascending tag order and ties keep the first maximum, i.e. the
/// lexicographically smallest tag sequence wins.
pub fn brute_force_order(
    anchor: &ProposalSet,
    candidates: &[ProposalSet],
    store: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<(Vec<usize>, f64)> {
    if candidates.is_empty() {
        return Err(CoreError::contract("brute_force_order needs at least one candidate"));
    }
    if candidates.len() + 1 > BRUTE_FORCE_MAX_FRAMES {
        return Err(CoreError::Limit(format!(
            "brute force capped at {BRUTE_FORCE_MAX_FRAMES} frames, got {}",
            candidates.len() + 1
        )));
    }

    let mut by_tag: Vec<usize> = (0..candidates.len()).collect();
    by_tag.sort_by_key(|&i| (candidates[i].frame_tag, i));

    struct Search<'a> {
        anchor: &'a ProposalSet,
        candidates: &'a [ProposalSet],
        store: &'a ParameterStore,
        cfg: &'a ModelConfig,
        best: Option<(Vec<usize>, f64)>,
    }

    impl Search<'_> {
        fn dfs(&mut self, prefix: &mut Vec<usize>, remaining: &[usize], acc: f64) -> Result<()> {
            if remaining.is_empty() {
                let better = match &self.best {
                    None => true,
                    Some((_, s)) => acc > *s,
                };
                if better {
                    self.best = Some((prefix.clone(), acc));
                }
                return Ok(());
            }
            let frames: Vec<&ProposalSet> = std::iter::once(self.anchor)
                .chain(prefix.iter().map(|&i| &self.candidates[i]))
                .collect();
            let scores = score_candidates(&frames, remaining, self.candidates, self.store, self.cfg)?;
            for (slot, &ci) in remaining.iter().enumerate() {
                let mut rest = remaining.to_vec();
                rest.remove(slot);
                prefix.push(ci);
                self.dfs(prefix, &rest, acc + scores[slot])?;
                prefix.pop();
            }
            Ok(())
        }
    }

    let mut search = Search {
        anchor,
        candidates,
        store,
        cfg,
        best: None,
    };
    search.dfs(&mut Vec::new(), &by_tag, 0.0)?;
    Ok(search.best.expect("at least one permutation"))
}

/// Similarity between two frames: mean over all pairwise additive
/// attention scores computed on raw proposal features, no encoder
/// pass. Used for top-k retrieval ranking.
pub fn retrieval_similarity(a: &ProposalSet, b: &ProposalSet, store: &ParameterStore) -> Result<f64> {
    transition_prob(&a.features, &b.features, store)
}

/// Variant that first runs each frame through the encoder as a
/// single-frame sequence.
pub fn retrieval_similarity_encoded(
    a: &ProposalSet,
    b: &ProposalSet,
    store: &ParameterStore,
    cfg: &ModelConfig,
) -> Result<f64> {
    let encode = |f: &ProposalSet| -> Result<Tensor> {
        let mut g = TapeGraph::new();
        let p = store.bind(&mut g);
        let id = g.leaf(f.features.clone());
        let out = history_tokens_nodes(&mut g, &[id], &p, cfg)?;
        Ok(g.value(out[0]).clone())
    };
    transition_prob(&encode(a)?, &encode(b)?, store)
}
