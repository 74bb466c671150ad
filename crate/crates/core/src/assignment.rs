//! Bipartite assignment of predicted queries to ground-truth regions.
//!
//! Rows of a cost matrix are queries, columns are ground truths. The solver
//! pads to a square problem, runs the O(n³) shortest augmenting path
//! Hungarian method, and then walks the zero-reduced-cost graph to pick the
//! lexicographically smallest optimal pair set so ties resolve identically
//! on every run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{
    dice_loss, focal_loss, DEFAULT_DICE_SMOOTH, DEFAULT_FOCAL_ALPHA, DEFAULT_FOCAL_GAMMA,
};
use crate::tensor::Matrix;

pub const DEFAULT_LAMBDA_MASK: f64 = 1.0;

#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `(query, ground_truth)` pairs sorted by query index.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_queries: Vec<usize>,
    pub total_cost: f64,
}

impl AssignmentResult {
    pub fn matched_gt(&self, query: usize) -> Option<usize> {
        self.pairs
            .iter()
            .find(|(q, _)| *q == query)
            .map(|(_, g)| *g)
    }
}

/// Minimum-cost assignment of ground truths (columns) to distinct queries
/// (rows). Rectangular inputs are allowed in either orientation.
pub fn hungarian(cost: &Matrix) -> Result<AssignmentResult> {
    if !cost.is_finite() {
        return Err(Error::domain("assignment cost contains non-finite entries"));
    }
    let (rows, cols) = (cost.rows(), cost.cols());
    if rows == 0 || cols == 0 {
        return Ok(AssignmentResult {
            pairs: Vec::new(),
            unmatched_queries: (0..rows).collect(),
            total_cost: 0.0,
        });
    }
    let n = rows.max(cols);
    let scale = cost.values().iter().fold(0.0f64, |m, c| m.max(c.abs()));
    let sentinel = 2.0 * scale + 1.0;
    let padded = |i: usize, j: usize| {
        if i < rows && j < cols {
            cost.get(i, j)
        } else {
            sentinel
        }
    };

    let (u, v, mut row_to_col) = solve_square(n, &padded);
    let tol = 1e-9 * (1.0 + sentinel);
    let tight = |i: usize, j: usize| (padded(i, j) - u[i] - v[j]).abs() <= tol;
    let optimum: f64 = (0..n).map(|i| padded(i, row_to_col[i])).sum();

    let mut refined = row_to_col.clone();
    if lexicographic_refine(n, cols, &tight, &mut refined) {
        let refined_cost: f64 = (0..n).map(|i| padded(i, refined[i])).sum();
        if (refined_cost - optimum).abs() <= tol * n as f64 {
            row_to_col = refined;
        }
    }

    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    let mut total = 0.0;
    for (i, &j) in row_to_col.iter().enumerate().take(rows) {
        if j < cols {
            pairs.push((i, j));
            total += cost.get(i, j);
        } else {
            unmatched.push(i);
        }
    }
    Ok(AssignmentResult {
        pairs,
        unmatched_queries: unmatched,
        total_cost: total,
    })
}

/// Shortest augmenting path Hungarian method on an `n × n` cost function.
/// Returns row potentials, column potentials and the row → column matching.
fn solve_square(n: usize, cost: &dyn Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based arrays; index 0 is the virtual root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];

    for i in 1..=n {
        col_owner[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
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
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if col_owner[j] > 0 {
            row_to_col[col_owner[j] - 1] = j - 1;
        }
    }
    (u[1..].to_vec(), v[1..].to_vec(), row_to_col)
}

/// Rewrites `matching` (a perfect matching inside the tight graph) into the
/// lexicographically smallest one: rows in order take the smallest real
/// column that still admits a completion, else a padding column.
fn lexicographic_refine(
    n: usize,
    real_cols: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    matching: &mut [usize],
) -> bool {
    let mut col_to_row = vec![usize::MAX; n];
    for (i, &j) in matching.iter().enumerate() {
        col_to_row[j] = i;
    }
    let mut fixed_cols = vec![false; n];
    for i in 0..n {
        let current = matching[i];
        let candidates = (0..real_cols).chain(std::iter::once(usize::MAX));
        let mut placed = false;
        for j in candidates {
            // Any padding column is as good as another; keep the current one
            // if it is padding, else look for a free tight padding column.
            let j = if j == usize::MAX {
                if current >= real_cols {
                    current
                } else {
                    match (real_cols..n).find(|&c| !fixed_cols[c] && tight(i, c)) {
                        Some(c) => c,
                        None => continue,
                    }
                }
            } else {
                j
            };
            if fixed_cols[j] || !tight(i, j) {
                continue;
            }
            if j == current {
                placed = true;
                break;
            }
            // Move row i onto j; the displaced row must reach i's old column
            // through an alternating path over unfixed rows and columns.
            let displaced = col_to_row[j];
            let mut trial = matching.to_vec();
            let mut trial_owner = col_to_row.clone();
            trial[i] = j;
            trial_owner[j] = i;
            trial_owner[current] = usize::MAX;
            let mut fixed = fixed_cols.clone();
            fixed[j] = true;
            let mut seen = vec![false; n];
            if augment(
                displaced,
                n,
                i,
                tight,
                &mut trial,
                &mut trial_owner,
                &fixed,
                &mut seen,
            ) {
                matching.copy_from_slice(&trial);
                col_to_row = trial_owner;
                placed = true;
                break;
            }
        }
        if !placed {
            return false;
        }
        fixed_cols[matching[i]] = true;
    }
    true
}

/// Kuhn-style augmenting search from `row` over rows `> pinned_upto`.
#[allow(clippy::too_many_arguments)]
fn augment(
    row: usize,
    n: usize,
    pinned_upto: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    matching: &mut [usize],
    owner: &mut [usize],
    fixed: &[bool],
    seen: &mut [bool],
) -> bool {
    for j in 0..n {
        if fixed[j] || seen[j] || !tight(row, j) {
            continue;
        }
        seen[j] = true;
        let holder = owner[j];
        if holder == usize::MAX
            || (holder > pinned_upto
                && augment(holder, n, pinned_upto, tight, matching, owner, fixed, seen))
        {
            matching[row] = j;
            owner[j] = row;
            return true;
        }
    }
    false
}

/// Weights of the mask term inside the matching cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskCostParams {
    pub lambda_mask: f64,
    pub dice_smooth: f64,
    pub focal_gamma: f64,
    pub focal_alpha: f64,
}

impl Default for MaskCostParams {
    fn default() -> Self {
        MaskCostParams {
            lambda_mask: DEFAULT_LAMBDA_MASK,
            dice_smooth: DEFAULT_DICE_SMOOTH,
            focal_gamma: DEFAULT_FOCAL_GAMMA,
            focal_alpha: DEFAULT_FOCAL_ALPHA,
        }
    }
}

/// `cost(q, g) = -p_q(class_g) + λ (dice + focal)(mask_q, mask_g)`.
pub fn build_assignment_cost(
    query_class_probs: &Matrix,
    query_masks: &[Vec<f64>],
    gt_classes: &[usize],
    gt_masks: &[Vec<bool>],
    params: &MaskCostParams,
) -> Result<Matrix> {
    if query_masks.len() != query_class_probs.rows() {
        return Err(Error::shape(format!(
            "{} query masks for {} queries",
            query_masks.len(),
            query_class_probs.rows()
        )));
    }
    if gt_masks.len() != gt_classes.len() {
        return Err(Error::shape(format!(
            "{} ground-truth masks for {} classes",
            gt_masks.len(),
            gt_classes.len()
        )));
    }
    if let Some(&bad) = gt_classes.iter().find(|&&c| c >= query_class_probs.cols()) {
        return Err(Error::Index {
            index: bad,
            len: query_class_probs.cols(),
        });
    }
    let mut cost = Matrix::zeros(query_masks.len(), gt_classes.len());
    for (q, qmask) in query_masks.iter().enumerate() {
        for (g, (&class, gmask)) in gt_classes.iter().zip(gt_masks).enumerate() {
            let mut c = -query_class_probs.get(q, class);
            if params.lambda_mask != 0.0 {
                let dice = dice_loss(qmask, gmask, params.dice_smooth)?.value;
                let focal = focal_loss(qmask, gmask, params.focal_gamma, params.focal_alpha)?.value;
                c += params.lambda_mask * (dice + focal);
            }
            cost.set(q, g, c);
        }
    }
    Ok(cost)
}
