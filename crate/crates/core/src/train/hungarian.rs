//! Minimum-cost one-to-one assignment of ground-truth moments to decoder
//! queries, with deterministic lexicographic tie-breaking.

use crate::error::{DmError, Result};

/// Cost matrix indexed `[query][gt]`, row-major with `gts` columns.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub queries: usize,
    pub gts: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(queries: usize, gts: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != queries * gts {
            return Err(DmError::Shape {
                op: "cost matrix",
                lhs: (queries, gts),
                rhs: (1, data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DmError::NonFinite("assignment cost".into()));
        }
        Ok(CostMatrix { queries, gts, data })
    }

    pub fn cost(&self, query: usize, gt: usize) -> f64 {
        self.data[query * self.gts + gt]
    }
}

/// Potentials-based Hungarian algorithm on a rows x cols matrix with
/// rows <= cols, assigning every row to a distinct column. Returns
/// (assignment row -> col, total cost).
fn solve_rows_to_cols(rows: usize, cols: usize, cost: impl Fn(usize, usize) -> f64) -> (Vec<usize>, f64) {
    debug_assert!(rows <= cols);
    let inf = f64::INFINITY;
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    // matched_row[j] = 1-based row occupying column j; 0 = free.
    let mut matched_row = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];

    for i in 1..=rows {
        matched_row[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = matched_row[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
                if used[j] {
                    u[matched_row[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if matched_row[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            matched_row[j0] = matched_row[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assign = vec![usize::MAX; rows];
    for j in 1..=cols {
        if matched_row[j] > 0 {
            assign[matched_row[j] - 1] = j - 1;
        }
    }
    let total = (0..rows).map(|r| cost(r, assign[r])).sum();
    (assign, total)
}

/// Optimal injective map from ground truths to queries. Among cost ties the
/// assignment vector (indexed by ground truth) is lexicographically
/// smallest, which both pins down determinism and matches the brute-force
/// oracle used in the tests.
pub fn hungarian_match(cost: &CostMatrix) -> Result<Vec<usize>> {
    let (p, g) = (cost.queries, cost.gts);
    if g > p {
        return Err(DmError::GtExceedsQueries { gt: g, queries: p });
    }
    if g == 0 {
        return Ok(Vec::new());
    }
    // Ground truths are the scarce side; assign them to queries.
    let (_, best_total) = solve_rows_to_cols(g, p, |gt, q| cost.cost(q, gt));
    let tol = 1e-9 * (1.0 + best_total.abs());

    // Fix queries ground truth by ground truth, taking the smallest query
    // index that still completes to an optimal assignment.
    let mut fixed: Vec<usize> = Vec::with_capacity(g);
    let mut fixed_cost = 0.0;
    for gt in 0..g {
        let mut chosen = None;
        for q in 0..p {
            if fixed.contains(&q) {
                continue;
            }
            let head = fixed_cost + cost.cost(q, gt);
            let remaining_gts: Vec<usize> = (gt + 1..g).collect();
            let remaining_qs: Vec<usize> =
                (0..p).filter(|cand| !fixed.contains(cand) && *cand != q).collect();
            let tail = if remaining_gts.is_empty() {
                0.0
            } else {
                solve_rows_to_cols(remaining_gts.len(), remaining_qs.len(), |r, c| {
                    cost.cost(remaining_qs[c], remaining_gts[r])
                })
                .1
            };
            if head + tail <= best_total + tol {
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.expect("an optimal completion must exist");
        fixed_cost += cost.cost(q, gt);
        fixed.push(q);
    }
    Ok(fixed)
}
