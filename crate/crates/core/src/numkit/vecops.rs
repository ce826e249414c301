//! Small helpers over `&[f64]` vectors.

use crate::error::{dim_err, Result};

use super::DenseVector;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn add(a: &[f64], b: &[f64]) -> DenseVector {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

pub fn sub(a: &[f64], b: &[f64]) -> DenseVector {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

pub fn scale(a: &[f64], alpha: f64) -> DenseVector {
    a.iter().map(|x| alpha * x).collect()
}

pub fn hadamard(a: &[f64], b: &[f64]) -> DenseVector {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

/// `y += alpha · x`
pub fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Cosine of the angle between `a` and `b`; `None` when either is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let na = norm(a);
    let nb = norm(b);
    if na == 0.0 || nb == 0.0 {
        return None;
    }
    Some((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

pub fn mean(a: &[f64]) -> f64 {
    if a.is_empty() {
        return 0.0;
    }
    a.iter().sum::<f64>() / a.len() as f64
}

/// Population standard deviation (divides by `n`).
pub fn std_dev(a: &[f64]) -> f64 {
    let mu = mean(a);
    (a.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / a.len() as f64).sqrt()
}

pub(crate) fn check_len(op: &'static str, v: &[f64], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(dim_err(op, expected, v.len()));
    }
    Ok(())
}

/// Frobenius norm of a sequence of vectors treated as matrix columns.
pub fn seq_norm(vs: &[DenseVector]) -> f64 {
    vs.iter().map(|v| dot(v, v)).sum::<f64>().sqrt()
}

/// Frobenius distance between two equally shaped vector sequences.
pub fn seq_distance(a: &[DenseVector], b: &[DenseVector]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let d = distance(x, y);
            d * d
        })
        .sum::<f64>()
        .sqrt()
}
