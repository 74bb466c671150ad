//! Entropic relaxation of the subgraph matching program.
//!
//! Given a node affinity `A` between visual and linguistic subgraph nodes,
//! the relaxed plan maximizes `⟨A, P⟩ + ε H(P)` subject to prescribed row and
//! column sums. The maximizer has the scaling form `diag(u) exp(A/ε) diag(v)`
//! and is found by alternately matching row and column sums in log space.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{argmax, cosine_slices, Matrix, Vector};

pub const DEFAULT_EPSILON: f64 = 0.1;
pub const DEFAULT_MAX_ITER: usize = 1000;
pub const DEFAULT_TOL: f64 = 1e-6;
/// Allowed gap between total row mass and total column mass.
pub const MARGINAL_TOTAL_TOL: f64 = 1e-9;

/// Row and column sums a plan must satisfy.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalSpec {
    row_targets: Vector,
    col_targets: Vector,
}

impl MarginalSpec {
    pub fn new(row_targets: Vec<f64>, col_targets: Vec<f64>) -> Result<Self> {
        let rows = Vector::new(row_targets)?;
        let cols = Vector::new(col_targets)?;
        for (side, v) in [("row", &rows), ("column", &cols)] {
            if let Some(i) = v.as_slice().iter().position(|t| *t <= 0.0) {
                return Err(Error::Validation(format!(
                    "{side} target {i} must be positive, got {}",
                    v.as_slice()[i]
                )));
            }
        }
        let (rt, ct): (f64, f64) = (rows.as_slice().iter().sum(), cols.as_slice().iter().sum());
        if (rt - ct).abs() > MARGINAL_TOTAL_TOL * rt.max(ct).max(1.0) {
            return Err(Error::Validation(format!(
                "row and column targets must carry equal total mass: rows sum to {rt}, columns to {ct}"
            )));
        }
        Ok(MarginalSpec {
            row_targets: rows,
            col_targets: cols,
        })
    }

    /// Marginals of the subgraph matching constraint: every linguistic node
    /// receives unit mass and the `M` units are spread evenly over the
    /// visual nodes.
    pub fn for_subgraphs(visual_nodes: usize, linguistic_nodes: usize) -> Result<Self> {
        if visual_nodes == 0 || linguistic_nodes == 0 {
            return Err(Error::domain("subgraph matching needs nodes on both sides"));
        }
        let per_row = linguistic_nodes as f64 / visual_nodes as f64;
        MarginalSpec::new(vec![per_row; visual_nodes], vec![1.0; linguistic_nodes])
    }

    pub fn row_targets(&self) -> &[f64] {
        self.row_targets.as_slice()
    }

    pub fn col_targets(&self) -> &[f64] {
        self.col_targets.as_slice()
    }

    pub fn total(&self) -> f64 {
        self.row_targets.as_slice().iter().sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub plan: Matrix,
    pub converged: bool,
    /// Largest absolute deviation of any row or column sum from its target.
    pub marginal_error: f64,
    pub iterations: usize,
}

/// Solver settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornParams {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for SinkhornParams {
    fn default() -> Self {
        SinkhornParams {
            epsilon: DEFAULT_EPSILON,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

/// Cosine affinity between every visual node (rows) and linguistic node (columns).
pub fn affinity_matrix(visual: &[Vector], linguistic: &[Vector]) -> Result<Matrix> {
    let mut out = Matrix::zeros(visual.len(), linguistic.len());
    for (i, v) in visual.iter().enumerate() {
        for (j, t) in linguistic.iter().enumerate() {
            out.set(i, j, cosine_slices(v.as_slice(), t.as_slice())?);
        }
    }
    Ok(out)
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sinkhorn_normalize(
    affinity: &Matrix,
    marginals: &MarginalSpec,
    params: &SinkhornParams,
) -> Result<TransportPlan> {
    let SinkhornParams {
        epsilon,
        max_iter,
        tol,
    } = *params;
    if !(epsilon > 0.0 && epsilon.is_finite()) {
        return Err(Error::domain(format!(
            "epsilon must be positive, got {epsilon}"
        )));
    }
    if !affinity.is_finite() {
        return Err(Error::domain("affinity contains non-finite entries"));
    }
    let (n, m) = (affinity.rows(), affinity.cols());
    if marginals.row_targets().len() != n || marginals.col_targets().len() != m {
        return Err(Error::shape(format!(
            "{n}x{m} affinity with {} row and {} column targets",
            marginals.row_targets().len(),
            marginals.col_targets().len()
        )));
    }

    let kernel: Vec<f64> = affinity.values().iter().map(|a| a / epsilon).collect();
    let log_r: Vec<f64> = marginals.row_targets().iter().map(|r| r.ln()).collect();
    let log_c: Vec<f64> = marginals.col_targets().iter().map(|c| c.ln()).collect();
    let mut f = vec![0.0; n];
    let mut g = vec![0.0; m];

    let plan_of = |f: &[f64], g: &[f64]| -> Vec<f64> {
        let mut p = Vec::with_capacity(n * m);
        for i in 0..n {
            for j in 0..m {
                p.push((kernel[i * m + j] + f[i] + g[j]).exp());
            }
        }
        p
    };

    let mut iterations = 0;
    let mut converged = false;
    let mut error = f64::INFINITY;
    while iterations < max_iter {
        iterations += 1;
        for i in 0..n {
            let row = &kernel[i * m..(i + 1) * m];
            f[i] = log_r[i] - log_sum_exp(row.iter().zip(&g).map(|(k, gj)| k + gj));
        }
        for j in 0..m {
            g[j] = log_c[j] - log_sum_exp((0..n).map(|i| kernel[i * m + j] + f[i]));
        }
        error = marginal_error(&plan_of(&f, &g), n, m, marginals);
        if error <= tol {
            converged = true;
            break;
        }
    }

    let plan = Matrix::new(n, m, plan_of(&f, &g))?;
    Ok(TransportPlan {
        plan,
        converged,
        marginal_error: error,
        iterations,
    })
}

fn marginal_error(p: &[f64], n: usize, m: usize, marginals: &MarginalSpec) -> f64 {
    let mut worst = 0.0f64;
    for (i, target) in marginals.row_targets().iter().enumerate() {
        let s: f64 = p[i * m..(i + 1) * m].iter().sum();
        worst = worst.max((s - target).abs());
    }
    for (j, target) in marginals.col_targets().iter().enumerate() {
        let s: f64 = (0..n).map(|i| p[i * m + j]).sum();
        worst = worst.max((s - target).abs());
    }
    worst
}

/// Column of the largest entry in every row (lowest index on ties).
pub fn argmax_rows(m: &Matrix) -> Vec<usize> {
    (0..m.rows())
        .map(|r| argmax(m.row(r)).unwrap_or(0))
        .collect()
}

/// Most matched linguistic node for every visual node of a plan.
pub fn argmax_match(plan: &TransportPlan) -> Vec<usize> {
    argmax_rows(&plan.plan)
}
