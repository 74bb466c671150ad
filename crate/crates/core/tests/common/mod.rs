//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("fixtures")
        .join(name)
}

/// Minimum total cost over every injective assignment of the smaller side
/// into the larger one.
pub fn exhaustive_min_cost(cost: &[Vec<f64>]) -> f64 {
    let cols = cost.first().map_or(0, Vec::len);
    let flipped: Vec<Vec<f64>>;
    let cost = if cost.len() <= cols {
        cost
    } else {
        flipped = (0..cols)
            .map(|c| cost.iter().map(|r| r[c]).collect())
            .collect();
        &flipped
    };
    fn go(i: usize, cost: &[Vec<f64>], used: &mut [bool]) -> f64 {
        if i == cost.len() {
            return 0.0;
        }
        let mut best = f64::INFINITY;
        for l in 0..used.len() {
            if !used[l] {
                used[l] = true;
                best = best.min(cost[i][l] + go(i + 1, cost, used));
                used[l] = false;
            }
        }
        best
    }
    let width = cost.first().map_or(0, Vec::len);
    go(0, cost, &mut vec![false; width])
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&x, &y| a[x][col].abs().total_cmp(&a[y][col].abs()))
            .unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            let pivot_row = a[col].clone();
            for (x, p) in a[r][col..].iter_mut().zip(&pivot_row[col..]) {
                *x -= f * p;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    x
}

/// Entropic optimal transport `max <A,P> + ε H(P)` under row/column
/// marginals, solved by damped Newton ascent on the dual potentials
/// (last column potential pinned to zero).
pub fn entropic_ot_oracle(a: &[Vec<f64>], rows: &[f64], cols: &[f64], eps: f64) -> Vec<Vec<f64>> {
    let (n, m) = (rows.len(), cols.len());
    let plan = |x: &[f64]| -> Vec<Vec<f64>> {
        (0..n)
            .map(|i| {
                (0..m)
                    .map(|j| {
                        let g = if j + 1 < m { x[n + j] } else { 0.0 };
                        ((a[i][j] + x[i] + g) / eps).exp()
                    })
                    .collect()
            })
            .collect()
    };
    let dual = |x: &[f64]| -> f64 {
        let p = plan(x);
        let lin: f64 = (0..n).map(|i| rows[i] * x[i]).sum::<f64>()
            + (0..m - 1).map(|j| cols[j] * x[n + j]).sum::<f64>();
        lin - eps * p.iter().flatten().sum::<f64>()
    };
    let mut x = vec![0.0; n + m - 1];
    for _ in 0..200 {
        let p = plan(&x);
        let mut grad = vec![0.0; n + m - 1];
        let mut hess = vec![vec![0.0; n + m - 1]; n + m - 1];
        for i in 0..n {
            let s: f64 = p[i].iter().sum();
            grad[i] = rows[i] - s;
            hess[i][i] = s / eps;
        }
        for j in 0..m - 1 {
            let s: f64 = (0..n).map(|i| p[i][j]).sum();
            grad[n + j] = cols[j] - s;
            hess[n + j][n + j] = s / eps;
            for i in 0..n {
                hess[i][n + j] = p[i][j] / eps;
                hess[n + j][i] = p[i][j] / eps;
            }
        }
        if grad.iter().all(|g| g.abs() < 1e-13) {
            break;
        }
        let step = solve_dense(hess, grad.clone());
        let base = dual(&x);
        let slope: f64 = grad.iter().zip(&step).map(|(g, s)| g * s).sum();
        let mut t = 1.0;
        loop {
            let cand: Vec<f64> = x.iter().zip(&step).map(|(xi, si)| xi + t * si).collect();
            if dual(&cand) >= base + 1e-4 * t * slope || t < 1e-12 {
                x = cand;
                break;
            }
            t *= 0.5;
        }
    }
    plan(&x)
}

/// Central finite difference of `f` at `x`.
pub fn central_difference(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `‖a - b‖ / max(‖a‖, ‖b‖)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-12 {
        0.0
    } else {
        norm(&diff) / scale
    }
}
