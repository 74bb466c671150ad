//! Dense vectors and matrices, similarity functions and a finite-difference
//! gradient oracle.
//!
//! Everything is `f64`. The types are deliberately small: the matching code
//! only needs inner products, matrix-vector products and rank-one updates.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Absolute slack allowed on `|cos| <= 1`.
pub const COSINE_SLACK: f64 = 1e-12;

/// A dense real vector with at least one finite entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::domain("vector dimension must be positive"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "vector entry {i} is {}",
                values[i]
            )));
        }
        Ok(Vector(values))
    }

    /// Builds a vector without validation. Callers guarantee finiteness.
    pub(crate) fn from_raw(values: Vec<f64>) -> Self {
        debug_assert!(!values.is_empty());
        Vector(values)
    }

    pub fn zeros(dim: usize) -> Self {
        Vector(vec![0.0; dim.max(1)])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &Vector) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(dot(&self.0, &other.0))
    }

    pub fn norm(&self) -> f64 {
        norm(&self.0)
    }

    pub fn scaled(&self, factor: f64) -> Vector {
        Vector(self.0.iter().map(|v| v * factor).collect())
    }

    /// `self += factor * other`.
    pub fn axpy(&mut self, factor: f64, other: &Vector) -> Result<()> {
        check_dims(self.dim(), other.dim())?;
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            *a += factor * b;
        }
        Ok(())
    }

    pub fn normalized(&self) -> Result<Vector> {
        let n = self.norm();
        if n == 0.0 {
            return Err(Error::domain("cannot normalize a zero vector"));
        }
        Ok(self.scaled(1.0 / n))
    }
}

impl TryFrom<Vec<f64>> for Vector {
    type Error = Error;

    fn try_from(values: Vec<f64>) -> Result<Self> {
        Vector::new(values)
    }
}

impl From<Vector> for Vec<f64> {
    fn from(v: Vector) -> Self {
        v.0
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows * cols != values.len() {
            return Err(Error::shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {}) is {}",
                i / cols.max(1),
                i % cols.max(1),
                values[i]
            )));
        }
        Ok(Matrix { rows, cols, values })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            values: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.values[i * n + i] = 1.0;
        }
        m
    }

    /// Builds a matrix from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(Error::shape(format!(
                "row {bad} has length {}, expected {cols}",
                rows[bad].len()
            )));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|r| self.row(r).to_vec()).collect()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.values[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.values[r * self.cols..(r + 1) * self.cols]
    }

    /// `self * x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vector> {
        check_dims(self.cols, x.len())?;
        Ok(Vector::from_raw(
            (0..self.rows).map(|r| dot(self.row(r), x)).collect(),
        ))
    }

    /// `selfᵀ * y`.
    pub fn matvec_transposed(&self, y: &[f64]) -> Result<Vector> {
        check_dims(self.rows, y.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(self.row(r)) {
                *o += a * yr;
            }
        }
        Ok(Vector::from_raw(out))
    }

    /// `self += alpha * a bᵀ`.
    pub fn add_outer(&mut self, alpha: f64, a: &[f64], b: &[f64]) -> Result<()> {
        check_dims(self.rows, a.len())?;
        check_dims(self.cols, b.len())?;
        for (r, &ar) in a.iter().enumerate() {
            let scale = alpha * ar;
            if scale == 0.0 {
                continue;
            }
            let row = &mut self.values[r * self.cols..(r + 1) * self.cols];
            for (v, bc) in row.iter_mut().zip(b) {
                *v += scale * bc;
            }
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, alpha: f64, other: &Matrix) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for v in &mut self.values {
            *v *= factor;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

impl Serialize for Matrix {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        Matrix::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// An ordered set of equal-dimension embeddings.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct EmbeddingSet {
    items: Vec<Vector>,
}

impl EmbeddingSet {
    pub fn new(items: Vec<Vector>) -> Result<Self> {
        if let Some(first) = items.first() {
            let d = first.dim();
            if let Some(i) = items.iter().position(|v| v.dim() != d) {
                return Err(Error::shape(format!(
                    "embedding {i} has dimension {}, expected {d}",
                    items[i].dim()
                )));
            }
        }
        Ok(EmbeddingSet { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn dim(&self) -> Option<usize> {
        self.items.first().map(Vector::dim)
    }

    pub fn get(&self, i: usize) -> Option<&Vector> {
        self.items.get(i)
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Vector> {
        self.items.iter()
    }

    pub fn as_slice(&self) -> &[Vector] {
        &self.items
    }
}

impl std::ops::Index<usize> for EmbeddingSet {
    type Output = Vector;

    fn index(&self, i: usize) -> &Vector {
        &self.items[i]
    }
}

pub(crate) fn check_dims(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::shape(format!("dimension {a} vs {b}")));
    }
    Ok(())
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::domain(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

pub fn cosine_similarity(u: &Vector, v: &Vector) -> Result<f64> {
    cosine_slices(u.as_slice(), v.as_slice())
}

pub(crate) fn cosine_slices(u: &[f64], v: &[f64]) -> Result<f64> {
    check_dims(u.len(), v.len())?;
    let nu = norm(u);
    let nv = norm(v);
    if nu == 0.0 || nv == 0.0 {
        return Err(Error::domain("cosine similarity of a zero-norm vector"));
    }
    Ok((dot(u, v) / (nu * nv)).clamp(-1.0, 1.0))
}

/// Gradient of `cos(u, v)` with respect to `u`.
pub fn cosine_gradient(u: &Vector, v: &Vector) -> Result<Vector> {
    let cos = cosine_similarity(u, v)?;
    let nu = u.norm();
    let nv = v.norm();
    Ok(Vector::from_raw(
        u.as_slice()
            .iter()
            .zip(v.as_slice())
            .map(|(a, b)| b / (nu * nv) - cos * a / (nu * nu))
            .collect(),
    ))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `1 / (1 + exp(-cos(u, v) / tau))`.
pub fn scaled_sigmoid_similarity(u: &Vector, v: &Vector, tau: f64) -> Result<f64> {
    check_tau(tau)?;
    Ok(sigmoid(cosine_similarity(u, v)? / tau))
}

pub fn softmax_with_temperature(logits: &Vector, tau: f64) -> Result<Vector> {
    check_tau(tau)?;
    let max = logits
        .as_slice()
        .iter()
        .copied()
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits
        .as_slice()
        .iter()
        .map(|l| ((l - max) / tau).exp())
        .collect();
    let total: f64 = exps.iter().sum();
    Ok(Vector::from_raw(
        exps.into_iter().map(|e| e / total).collect(),
    ))
}

/// Indices of the `k` largest scores in descending order. Ties go to the
/// lower index. Returns every index when fewer than `k` scores exist.
pub fn top_k_indices(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Index of the largest value, lowest index on ties. `None` when empty.
pub fn argmax(values: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, v) in values.iter().enumerate() {
        match best {
            Some(b) if values[b] >= *v => {}
            _ => best = Some(i),
        }
    }
    best
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: FnMut(&Vector) -> f64,
{
    if h.is_nan() || h <= 0.0 {
        return Err(Error::domain(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.dim());
    for i in 0..x.dim() {
        let orig = probe.0[i];
        probe.0[i] = orig + h;
        let plus = f(&probe);
        probe.0[i] = orig - h;
        let minus = f(&probe);
        probe.0[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated to {plus} / {minus} around coordinate {i}"
            )));
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(Vector::from_raw(grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn v(x: &[f64]) -> Vector {
        Vector::new(x.to_vec()).unwrap()
    }

    #[test]
    fn cosine_examples() {
        assert!(
            (cosine_similarity(&v(&[1., 2., 3.]), &v(&[1., 2., 3.])).unwrap() - 1.0).abs() < 1e-15
        );
        assert_eq!(
            cosine_similarity(&v(&[1., 0.]), &v(&[0., 1.])).unwrap(),
            0.0
        );
        assert!((cosine_similarity(&v(&[1., 2.]), &v(&[2., 1.])).unwrap() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_errors() {
        assert!(matches!(
            cosine_similarity(&v(&[0., 0.]), &v(&[1., 0.])),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            cosine_similarity(&v(&[1., 0.]), &v(&[1., 0., 0.])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn scaled_sigmoid_examples() {
        let s = scaled_sigmoid_similarity(&v(&[1., 0.]), &v(&[0., 1.]), 0.37).unwrap();
        assert_eq!(s, 0.5);
        let s = scaled_sigmoid_similarity(&v(&[1., 2.]), &v(&[1., 2.]), 0.01).unwrap();
        assert!((s - 1.0 / (1.0 + (-100f64).exp())).abs() < 1e-12);
        let s = scaled_sigmoid_similarity(&v(&[1., 2.]), &v(&[-1., -2.]), 1.0).unwrap();
        assert!((s - 1.0 / (1.0 + std::f64::consts::E)).abs() < 1e-12);
        assert!((s - 0.2689).abs() < 1e-4);
        assert!(scaled_sigmoid_similarity(&v(&[1.]), &v(&[1.]), 0.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_with_temperature(&v(&[3., 3., 3., 3.]), 0.5).unwrap();
        for x in p.as_slice() {
            assert!((x - 0.25).abs() < 1e-15);
        }
        let e = std::f64::consts::E;
        let p = softmax_with_temperature(&v(&[1., 0.]), 1.0).unwrap();
        assert!((p.as_slice()[0] - e / (e + 1.0)).abs() < 1e-15);
        assert!((p.as_slice()[1] - 1.0 / (e + 1.0)).abs() < 1e-15);
        let p = softmax_with_temperature(&v(&[1., 0.]), 0.01).unwrap();
        assert!(p.as_slice()[0] > 1.0 - 1e-12);
        assert!(softmax_with_temperature(&v(&[1.]), -1.0).is_err());
    }

    #[test]
    fn top_k_examples() {
        assert_eq!(top_k_indices(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
        assert_eq!(top_k_indices(&[0.5, 0.5], 1), vec![0]);
        assert_eq!(top_k_indices(&[0.3], 3), vec![0]);
    }

    #[test]
    fn finite_difference_examples() {
        let x = v(&[1., 2.]);
        let g = finite_difference_gradient(|x| x.dot(x).unwrap(), &x, 1e-5).unwrap();
        assert!((g.as_slice()[0] - 2.0).abs() < 1e-6);
        assert!((g.as_slice()[1] - 4.0).abs() < 1e-6);
        let g = finite_difference_gradient(|_| 7.0, &x, 1e-5).unwrap();
        assert!(g.as_slice().iter().all(|&c| c == 0.0));
        let g =
            finite_difference_gradient(|x| x.as_slice().iter().sum(), &v(&[0.3, -4., 9.]), 1e-5)
                .unwrap();
        assert!(g.as_slice().iter().all(|c| (c - 1.0).abs() < 1e-9));
        assert!(matches!(
            finite_difference_gradient(|_| f64::NAN, &x, 1e-5),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn cosine_gradient_matches_fd() {
        let u = v(&[0.3, -1.2, 0.7]);
        let w = v(&[1.1, 0.4, -0.2]);
        let g = cosine_gradient(&u, &w).unwrap();
        let fd =
            finite_difference_gradient(|x| cosine_similarity(x, &w).unwrap(), &u, 1e-6).unwrap();
        for (a, b) in g.as_slice().iter().zip(fd.as_slice()) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn matrix_products() {
        let m = Matrix::from_rows(&[vec![1., 2., 3.], vec![4., 5., 6.]]).unwrap();
        assert_eq!(m.matvec(&[1., 0., -1.]).unwrap().as_slice(), &[-2., -2.]);
        assert_eq!(
            m.matvec_transposed(&[1., 1.]).unwrap().as_slice(),
            &[5., 7., 9.]
        );
        assert!(Matrix::from_rows(&[vec![1.], vec![1., 2.]]).is_err());
        assert!(Matrix::new(2, 2, vec![1.0; 3]).is_err());
    }

    fn finite_vec(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, len)
    }

    proptest! {
        #[test]
        fn cosine_self_is_one(x in finite_vec(5)) {
            let u = Vector::new(x).unwrap();
            prop_assume!(u.norm() > 1e-6);
            prop_assert!((cosine_similarity(&u, &u).unwrap() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn cosine_bounded_and_symmetric(a in finite_vec(4), b in finite_vec(4)) {
            let (u, w) = (Vector::new(a).unwrap(), Vector::new(b).unwrap());
            prop_assume!(u.norm() > 1e-6 && w.norm() > 1e-6);
            let c = cosine_similarity(&u, &w).unwrap();
            prop_assert!(c.abs() <= 1.0 + COSINE_SLACK);
            prop_assert_eq!(c, cosine_similarity(&w, &u).unwrap());
        }

        #[test]
        fn scaled_sigmoid_monotone(pairs in prop::collection::vec((finite_vec(3), finite_vec(3)), 2..20), tau in 0.05f64..2.0) {
            let mut rows: Vec<(f64, f64)> = pairs
                .into_iter()
                .filter_map(|(a, b)| {
                    let (u, w) = (Vector::new(a).ok()?, Vector::new(b).ok()?);
                    if u.norm() < 1e-6 || w.norm() < 1e-6 { return None; }
                    Some((cosine_similarity(&u, &w).unwrap(), scaled_sigmoid_similarity(&u, &w, tau).unwrap()))
                })
                .collect();
            rows.sort_by(|a, b| a.0.total_cmp(&b.0));
            for (_, s) in &rows {
                prop_assert!(*s > 0.0 && *s < 1.0);
            }
            for w in rows.windows(2) {
                prop_assert!(w[1].1 >= w[0].1);
            }
        }

        #[test]
        fn softmax_sums_to_one(x in finite_vec(6), mag in -3i32..=3, tau in 0.01f64..10.0) {
            let scale = 10f64.powi(mag);
            let logits = Vector::new(x.iter().map(|v| v * scale).collect()).unwrap();
            let p = softmax_with_temperature(&logits, tau).unwrap();
            let total: f64 = p.as_slice().iter().sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
            prop_assert!(p.as_slice().iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn top_k_permutation_consistent(x in prop::collection::vec(0u8..20, 1..12), k in 1usize..6, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            use rand::SeedableRng;
            let scores: Vec<f64> = x.iter().map(|&v| v as f64).collect();
            let mut perm: Vec<usize> = (0..scores.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| scores[i]).collect();
            let a: Vec<f64> = top_k_indices(&scores, k).iter().map(|&i| scores[i]).collect();
            let b: Vec<f64> = top_k_indices(&permuted, k).iter().map(|&i| permuted[i]).collect();
            prop_assert_eq!(a, b);
            prop_assert_eq!(top_k_indices(&scores, k), top_k_indices(&scores, k));
        }
    }
}
