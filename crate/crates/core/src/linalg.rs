//! Small dense helpers shared by every module.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// A dense model (or direction) in R^d.
pub type ModelVector = DVector<f64>;

/// Cosine of the angle between `a` and `b`; zero when either vector is zero.
pub fn cosine(a: &ModelVector, b: &ModelVector) -> f64 {
    let na = a.norm();
    let nb = b.norm();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (a.dot(b) / (na * nb)).clamp(-1.0, 1.0)
}

pub fn check_dim(expected: usize, v: &ModelVector) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch {
            expected,
            got: v.len(),
        });
    }
    Ok(())
}

/// Unweighted centroid of a non-empty list of equal-length vectors.
pub fn centroid(points: &[ModelVector]) -> Result<ModelVector> {
    let first = points.first().ok_or(Error::Empty("point list"))?;
    let mut acc = ModelVector::zeros(first.len());
    for p in points {
        check_dim(first.len(), p)?;
        acc += p;
    }
    Ok(acc / points.len() as f64)
}

/// Weighted combination `sum_i w_i p_i`.
pub fn weighted_sum(points: &[ModelVector], weights: &[f64]) -> Result<ModelVector> {
    if points.len() != weights.len() {
        return Err(Error::LengthMismatch {
            what: "points/weights",
            left: points.len(),
            right: weights.len(),
        });
    }
    let first = points.first().ok_or(Error::Empty("point list"))?;
    let mut acc = ModelVector::zeros(first.len());
    for (p, w) in points.iter().zip(weights) {
        check_dim(first.len(), p)?;
        acc.axpy(*w, p, 1.0);
    }
    Ok(acc)
}

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if !m.is_square() {
        return false;
    }
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

/// Extreme eigenvalues `(min, max)` of a symmetric matrix.
pub fn symmetric_eigen_range(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = m.clone().symmetric_eigen();
    let min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

pub fn to_vec(v: &ModelVector) -> Vec<f64> {
    v.iter().copied().collect()
}

pub fn matrix_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}
