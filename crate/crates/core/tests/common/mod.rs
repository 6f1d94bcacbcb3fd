//! Shared brute-force oracles and fixture generators for the integration
//! and acceptance suites. Everything here recomputes results from first
//! principles (subset enumeration, permutation search, rescanning) and
//! stays independent of the library's implementation paths.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use dm_core::matching::{temporal_iou, Interval};

// ----------------------------------------------------------------- NMS oracle

/// Greedy suppression recomputed by exhaustive subset search: among all
/// pairwise-compatible maximal subsets, the greedy result is the one whose
/// sorted priority ranks are lexicographically smallest.
pub fn nms_oracle(candidates: &[(Interval, f64)], iou_t: f64) -> Vec<usize> {
    let n = candidates.len();
    assert!(n <= 16, "oracle is exponential");
    // Priority order identical to the contract: confidence desc, earlier
    // start, earlier end, original index.
    let mut priority: Vec<usize> = (0..n).collect();
    priority.sort_by(|&a, &b| {
        let (ia, ca) = candidates[a];
        let (ib, cb) = candidates[b];
        cb.partial_cmp(&ca)
            .unwrap()
            .then(ia.start().partial_cmp(&ib.start()).unwrap())
            .then(ia.end().partial_cmp(&ib.end()).unwrap())
            .then(a.cmp(&b))
    });
    let rank_of = {
        let mut r = vec![0usize; n];
        for (rank, &idx) in priority.iter().enumerate() {
            r[idx] = rank;
        }
        r
    };

    let compatible = |s: u32| -> bool {
        for a in 0..n {
            if s & (1 << a) == 0 {
                continue;
            }
            for b in (a + 1)..n {
                if s & (1 << b) == 0 {
                    continue;
                }
                if temporal_iou(candidates[a].0, candidates[b].0) > iou_t {
                    return false;
                }
            }
        }
        true
    };

    let mut best: Option<Vec<usize>> = None; // sorted ranks
    for s in 1u32..(1 << n) {
        if !compatible(s) {
            continue;
        }
        // Maximality: no candidate outside s can be added.
        let mut maximal = true;
        for extra in 0..n {
            if s & (1 << extra) != 0 {
                continue;
            }
            if compatible(s | (1 << extra)) {
                maximal = false;
                break;
            }
        }
        if !maximal {
            continue;
        }
        let mut ranks: Vec<usize> =
            (0..n).filter(|&i| s & (1 << i) != 0).map(|i| rank_of[i]).collect();
        ranks.sort_unstable();
        if best.as_ref().is_none_or(|b| ranks < *b) {
            best = Some(ranks);
        }
    }
    let ranks = best.unwrap_or_default();
    ranks.into_iter().map(|r| priority[r]).collect()
}

// ----------------------------------------------------------- Hungarian oracle

/// Exhaustive permutation search: minimal total cost, ties resolved to the
/// lexicographically smallest assignment vector.
pub fn hungarian_oracle(queries: usize, gts: usize, cost: &[f64]) -> Vec<usize> {
    assert!(gts <= queries && gts <= 6);
    let at = |q: usize, g: usize| cost[q * gts + g];
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut assign = vec![usize::MAX; gts];
    let mut used = vec![false; queries];

    fn recurse(
        g: usize,
        gts: usize,
        queries: usize,
        at: &dyn Fn(usize, usize) -> f64,
        used: &mut [bool],
        assign: &mut Vec<usize>,
        acc: f64,
        best: &mut Option<(f64, Vec<usize>)>,
    ) {
        if g == gts {
            let better = match best {
                None => true,
                Some((c, a)) => acc < *c - 1e-12 || ((acc - *c).abs() <= 1e-12 && assign < a),
            };
            if better {
                *best = Some((acc, assign.clone()));
            }
            return;
        }
        for q in 0..queries {
            if used[q] {
                continue;
            }
            used[q] = true;
            assign[g] = q;
            recurse(g + 1, gts, queries, at, used, assign, acc + at(q, g), best);
            assign[g] = usize::MAX;
            used[q] = false;
        }
    }
    recurse(0, gts, queries, &|q, g| at(q, g), &mut used, &mut assign, 0.0, &mut best);
    best.map(|(_, a)| a).unwrap_or_default()
}

// ----------------------------------------------------------------- AP oracles

#[derive(Debug, Clone, Copy)]
pub struct OraclePred {
    pub video: usize,
    pub start: u32,
    pub end: u32,
    pub sfx_id: u32,
    pub confidence: f64,
    pub class_of_match: (),
}

#[derive(Debug, Clone, Copy)]
pub struct OracleGt {
    pub video: usize,
    pub start: u32,
    pub end: u32,
    pub sfx_id: u32,
    pub class: Option<usize>,
}

fn iou_frames(a: (u32, u32), b: (u32, u32)) -> f64 {
    temporal_iou(
        Interval::new(a.0 as f64, a.1 as f64).unwrap(),
        Interval::new(b.0 as f64, b.1 as f64).unwrap(),
    )
}

/// Rescanning AP: precision at each true-positive rank recomputed from the
/// head of the list every time, no running counters.
pub fn ap_oracle(flags: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for rank in 0..flags.len() {
        if flags[rank] {
            let tp_at = flags[..=rank].iter().filter(|&&f| f).count();
            total += tp_at as f64 / (rank + 1) as f64;
        }
    }
    total / num_gt as f64
}

/// Greedy protocol recomputed without sorting: repeatedly pick the next
/// prediction by linear scan under the canonical order, then scan every
/// ground truth exhaustively.
pub fn match_oracle(
    preds: &[OraclePred],
    gts: &[OracleGt],
    iou_t: f64,
    require_sfx: bool,
    class_filter: Option<usize>,
) -> Vec<bool> {
    let before = |a: &OraclePred, b: &OraclePred| -> bool {
        if a.confidence != b.confidence {
            return a.confidence > b.confidence;
        }
        (a.video, a.start, a.end, a.sfx_id) < (b.video, b.start, b.end, b.sfx_id)
    };
    let mut processed = vec![false; preds.len()];
    let mut taken = vec![false; gts.len()];
    let mut flags = vec![false; preds.len()];
    let mut order = Vec::with_capacity(preds.len());
    for _ in 0..preds.len() {
        let mut pick: Option<usize> = None;
        for (i, p) in preds.iter().enumerate() {
            if processed[i] {
                continue;
            }
            if pick.is_none_or(|cur| before(p, &preds[cur])) {
                pick = Some(i);
            }
        }
        let i = pick.unwrap();
        processed[i] = true;
        order.push(i);

        let p = preds[i];
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if taken[gi] || g.video != p.video {
                continue;
            }
            if require_sfx && g.sfx_id != p.sfx_id {
                continue;
            }
            if let Some(cf) = class_filter {
                if g.class != Some(cf) {
                    continue;
                }
            }
            let iou = iou_frames((p.start, p.end), (g.start, g.end));
            if iou >= iou_t && best.is_none_or(|(_, b)| iou > b) {
                best = Some((gi, iou));
            }
        }
        if let Some((gi, _)) = best {
            taken[gi] = true;
            flags[i] = true;
        }
    }
    order.into_iter().map(|i| flags[i]).collect()
}

pub fn map_sfx_oracle(preds: &[OraclePred], gts: &[OracleGt], iou_t: f64) -> f64 {
    let mut ids: Vec<u32> = gts.iter().map(|g| g.sfx_id).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &id in &ids {
        let sub_gts: Vec<OracleGt> = gts.iter().filter(|g| g.sfx_id == id).copied().collect();
        let sub_preds: Vec<OraclePred> = preds.iter().filter(|p| p.sfx_id == id).copied().collect();
        let flags = match_oracle(&sub_preds, &sub_gts, iou_t, true, None);
        total += ap_oracle(&flags, sub_gts.len());
    }
    total / ids.len() as f64
}

pub fn map_vid_oracle(preds: &[OraclePred], gts: &[OracleGt], num_videos: usize, iou_t: f64) -> f64 {
    if num_videos == 0 {
        return 0.0;
    }
    let mut total = 0.0;
    for v in 0..num_videos {
        let sub_gts: Vec<OracleGt> = gts.iter().filter(|g| g.video == v).copied().collect();
        let sub_preds: Vec<OraclePred> = preds.iter().filter(|p| p.video == v).copied().collect();
        let flags = match_oracle(&sub_preds, &sub_gts, iou_t, true, None);
        total += ap_oracle(&flags, sub_gts.len());
    }
    total / num_videos as f64
}

pub fn map_key_oracle(preds: &[OraclePred], gts: &[OracleGt], iou_t: f64) -> Option<f64> {
    if gts.iter().all(|g| g.class.is_none()) {
        return None;
    }
    let mut total = 0.0;
    let mut counted = 0;
    for class in 0..4usize {
        let num_gt = gts.iter().filter(|g| g.class == Some(class)).count();
        if num_gt == 0 {
            continue;
        }
        let flags = match_oracle(preds, gts, iou_t, false, Some(class));
        total += ap_oracle(&flags, num_gt);
        counted += 1;
    }
    Some(if counted == 0 { 0.0 } else { total / counted as f64 })
}

// ------------------------------------------------------------------- fixtures

pub struct EvalFixture {
    pub preds: Vec<OraclePred>,
    pub gts: Vec<OracleGt>,
    pub num_videos: usize,
    pub num_sfx: u32,
}

/// Fixture whose ground truths are pairwise disjoint within each video,
/// the regime where one-to-one matching makes duplication strictly
/// unprofitable (above IoU 0.5 no prediction can reach two disjoint
/// ground truths at once).
pub fn random_disjoint_fixture(rng: &mut ChaCha8Rng) -> EvalFixture {
    let mut f = random_eval_fixture(rng);
    let mut kept: Vec<OracleGt> = Vec::new();
    for g in f.gts {
        if kept
            .iter()
            .filter(|k| k.video == g.video)
            .all(|k| g.end <= k.start || k.end <= g.start)
        {
            kept.push(g);
        }
    }
    f.gts = kept;
    f
}

pub fn random_eval_fixture(rng: &mut ChaCha8Rng) -> EvalFixture {
    let num_videos = 1 + rng.random_range(0..5usize);
    let num_sfx = 1 + rng.random_range(0..4u32);
    let mut gts = Vec::new();
    for v in 0..num_videos {
        let n = 12 + rng.random_range(0..18u32);
        let count = rng.random_range(0..5usize).min(4);
        for _ in 0..count {
            let len = 2 + rng.random_range(0..5u32);
            let start = rng.random_range(0..(n - len));
            gts.push(OracleGt {
                video: v,
                start,
                end: start + len,
                sfx_id: 1 + rng.random_range(0..num_sfx),
                class: if rng.random_range(0..10u32) < 8 {
                    Some(rng.random_range(0..4usize))
                } else {
                    None
                },
            });
        }
    }
    let num_preds = rng.random_range(0..9usize);
    let mut preds = Vec::new();
    for _ in 0..num_preds {
        let video = rng.random_range(0..num_videos);
        let len = 2 + rng.random_range(0..6u32);
        let start = rng.random_range(0..25u32);
        // Confidence on a coarse grid so ties actually happen.
        let confidence = (rng.random_range(0..8u32) as f64) / 8.0;
        preds.push(OraclePred {
            video,
            start,
            end: start + len,
            sfx_id: 1 + rng.random_range(0..num_sfx),
            confidence,
            class_of_match: (),
        });
    }
    EvalFixture { preds, gts, num_videos, num_sfx }
}
