//! Negative sampling for the contrastive losses.
//!
//! Tag-aware sampling scores a candidate negative by its similarity to the
//! moment when its tag differs from the positive's, and by the negated
//! similarity gap when the tags agree (a same-tag SFX that looks *too*
//! similar is likely a false negative; one that looks far weaker carries
//! little signal). Scores become a sampling distribution through a
//! temperature softmax, drawn without replacement.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Tag;
use crate::error::{DmError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegSampling {
    /// Full tag-aware sampling.
    Tans,
    /// Uniform over the candidate pool.
    Uniform,
    /// Top-K by similarity, deterministic.
    Hard,
    /// Tag-aware restricted to different-tag candidates.
    OneSide,
}

/// One candidate negative: its row in the SFX embedding matrix (>= 1), its
/// tag and its current similarity to the moment embedding.
#[derive(Debug, Clone, Copy)]
pub struct Candidate {
    pub row: usize,
    pub tag: Tag,
    pub sim: f64,
}

/// Tag-aware score before the softmax.
pub fn tans_score(pos_sim: f64, pos_tag: Tag, cand: &Candidate) -> f64 {
    if cand.tag != pos_tag {
        cand.sim
    } else {
        -(pos_sim - cand.sim).abs()
    }
}

/// Softmax of the tag-aware scores at temperature `tau_s`; sums to one.
pub fn tans_distribution(pos_sim: f64, pos_tag: Tag, candidates: &[Candidate], tau_s: f64) -> Vec<f64> {
    let scores: Vec<f64> = candidates.iter().map(|c| tans_score(pos_sim, pos_tag, c)).collect();
    softmax(&scores, tau_s)
}

fn softmax(scores: &[f64], tau: f64) -> Vec<f64> {
    let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - mx) / tau).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Draw `k` distinct indices from `probs` by sequential renormalization.
pub fn sample_without_replacement(probs: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    debug_assert!(k <= probs.len());
    let mut remaining: Vec<usize> = (0..probs.len()).collect();
    let mut weights: Vec<f64> = probs.to_vec();
    let mut out = Vec::with_capacity(k);
    for _ in 0..k {
        let total: f64 = weights.iter().sum();
        let mut dart = rng.random::<f64>() * total;
        let mut pick = weights.len() - 1;
        for (i, &w) in weights.iter().enumerate() {
            dart -= w;
            if dart <= 0.0 {
                pick = i;
                break;
            }
        }
        out.push(remaining[pick]);
        remaining.swap_remove(pick);
        weights.swap_remove(pick);
    }
    out
}

/// Tag-aware draw of `k` negatives; returns indices into `candidates`.
pub fn tans_sample(
    pos_sim: f64,
    pos_tag: Tag,
    candidates: &[Candidate],
    k: usize,
    tau_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    if candidates.len() < k {
        return Err(DmError::TooFewCandidates { have: candidates.len(), need: k });
    }
    let probs = tans_distribution(pos_sim, pos_tag, candidates, tau_s);
    Ok(sample_without_replacement(&probs, k, rng))
}

/// Draw negatives under the configured strategy; returns indices into
/// `candidates`. The one-side variant may return fewer than `k` when not
/// enough different-tag candidates exist.
pub fn draw_negatives(
    mode: NegSampling,
    pos_sim: f64,
    pos_tag: Tag,
    candidates: &[Candidate],
    k: usize,
    tau_s: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    match mode {
        NegSampling::Tans => tans_sample(pos_sim, pos_tag, candidates, k, tau_s, rng),
        NegSampling::Uniform => {
            if candidates.len() < k {
                return Err(DmError::TooFewCandidates { have: candidates.len(), need: k });
            }
            let probs = vec![1.0 / candidates.len() as f64; candidates.len()];
            Ok(sample_without_replacement(&probs, k, rng))
        }
        NegSampling::Hard => {
            if candidates.len() < k {
                return Err(DmError::TooFewCandidates { have: candidates.len(), need: k });
            }
            let mut order: Vec<usize> = (0..candidates.len()).collect();
            order.sort_by(|&a, &b| {
                candidates[b]
                    .sim
                    .partial_cmp(&candidates[a].sim)
                    .unwrap()
                    .then(candidates[a].row.cmp(&candidates[b].row))
            });
            Ok(order[..k].to_vec())
        }
        NegSampling::OneSide => {
            let filtered: Vec<usize> = (0..candidates.len())
                .filter(|&i| candidates[i].tag != pos_tag)
                .collect();
            if filtered.is_empty() {
                return Err(DmError::TooFewCandidates { have: 0, need: 1 });
            }
            let pool: Vec<Candidate> = filtered.iter().map(|&i| candidates[i]).collect();
            let take = k.min(pool.len());
            let probs = tans_distribution(pos_sim, pos_tag, &pool, tau_s);
            let picks = sample_without_replacement(&probs, take, rng);
            Ok(picks.into_iter().map(|i| filtered[i]).collect())
        }
    }
}
