//! One-sided (Hestenes) Jacobi SVD.
//!
//! Orthogonalizes the columns of a tall working copy by plane rotations
//! until every column pair is orthogonal to machine precision. The rotation
//! order is fixed, so results are bit-for-bit deterministic for a given input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{vecops, DenseMatrix, DenseVector};

/// Singular values below `RANK_TOL · s_max` count as zero.
pub const RANK_TOL: f64 = 1e-12;

const MAX_SWEEPS: usize = 80;
const ORTH_EPS: f64 = 1e-15;

/// Thin SVD `a = u · diag(s) · vt` with `k = min(rows, cols)` terms.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SvdResult {
    /// `rows × k`, orthonormal columns.
    pub u: DenseMatrix,
    /// Non-increasing, non-negative.
    pub s: DenseVector,
    /// `k × cols`, orthonormal rows.
    pub vt: DenseMatrix,
}

impl SvdResult {
    pub fn max_singular(&self) -> f64 {
        self.s.first().copied().unwrap_or(0.0)
    }

    /// Count of singular values above `tol · s_max`.
    pub fn rank(&self, tol: f64) -> usize {
        let smax = self.max_singular();
        if smax <= 0.0 {
            return 0;
        }
        self.s.iter().filter(|&&s| s > tol * smax).count()
    }

    pub fn numerical_rank(&self) -> usize {
        self.rank(RANK_TOL)
    }

    /// `n × r` matrix of the leading `r` right singular vectors.
    pub fn right_vectors(&self, r: usize) -> DenseMatrix {
        self.vt.leading_rows(r).transpose()
    }

    pub fn left_vectors(&self, r: usize) -> DenseMatrix {
        self.u.leading_columns(r)
    }

    pub fn reconstruct(&self) -> DenseMatrix {
        self.u
            .scale_cols(&self.s)
            .and_then(|us| us.matmul(&self.vt))
            .expect("SVD factors have consistent shapes")
    }
}

/// Singular value decomposition of a finite matrix.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if !a.is_finite() {
        return Err(Error::NonFinite("svd"));
    }
    if a.rows() >= a.cols() {
        jacobi_tall(a)
    } else {
        let t = jacobi_tall(&a.transpose())?;
        Ok(SvdResult {
            u: t.vt.transpose(),
            s: t.s,
            vt: t.u.transpose(),
        })
    }
}

/// Largest singular value (0 for empty matrices).
pub fn spectral_norm(a: &DenseMatrix) -> Result<f64> {
    Ok(svd(a)?.max_singular())
}

fn jacobi_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = a.shape();
    let mut work = a.columns();
    let mut v: Vec<DenseVector> = (0..n)
        .map(|j| {
            let mut e = vec![0.0; n];
            e[j] = 1.0;
            e
        })
        .collect();

    let mut converged = n < 2;
    for _sweep in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let alpha = vecops::dot(&work[p], &work[p]);
                let beta = vecops::dot(&work[q], &work[q]);
                let gamma = vecops::dot(&work[p], &work[q]);
                if gamma == 0.0 || gamma.abs() <= ORTH_EPS * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut work, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            converged = true;
        }
    }
    if !converged {
        return Err(Error::DecompositionFailure { sweeps: MAX_SWEEPS });
    }

    let norms: Vec<f64> = work.iter().map(|c| vecops::norm(c)).collect();
    let mut order: Vec<usize> = (0..n).collect();
    // Stable sort keeps ties in original column order.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s: DenseVector = order.iter().map(|&j| norms[j]).collect();
    let smax = s.first().copied().unwrap_or(0.0);
    let mut u_cols: Vec<Option<DenseVector>> = order
        .iter()
        .map(|&j| {
            let nj = norms[j];
            if nj > 0.0 && nj > smax * 1e-13 {
                Some(vecops::scale(&work[j], 1.0 / nj))
            } else {
                None
            }
        })
        .collect();
    complete_orthonormal(&mut u_cols, m);

    let u_cols: Vec<DenseVector> = u_cols.into_iter().map(|c| c.expect("completed")).collect();
    let u = DenseMatrix::from_columns(&u_cols)?;
    let u = if n == 0 { DenseMatrix::zeros(m, 0) } else { u };
    let vt = DenseMatrix::from_fn(n, n, |i, j| v[order[i]][j]);
    Ok(SvdResult { u, s, vt })
}

fn rotate(cols: &mut [DenseVector], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let cp = &mut left[p];
    let cq = &mut right[0];
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let xq = *y;
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// Fills the `None` slots with unit vectors orthogonal to every other slot.
fn complete_orthonormal(cols: &mut [Option<DenseVector>], m: usize) {
    for j in 0..cols.len() {
        if cols[j].is_some() {
            continue;
        }
        let mut best: Option<(f64, DenseVector)> = None;
        for k in 0..m {
            let mut e = vec![0.0; m];
            e[k] = 1.0;
            for _ in 0..2 {
                for c in cols.iter().flatten() {
                    let proj = vecops::dot(c, &e);
                    vecops::axpy(&mut e, -proj, c);
                }
            }
            let nrm = vecops::norm(&e);
            if best.as_ref().is_none_or(|(b, _)| nrm > *b) {
                best = Some((nrm, e));
            }
        }
        let (nrm, e) = best.expect("m > 0 whenever a column exists");
        cols[j] = Some(vecops::scale(&e, 1.0 / nrm));
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_has_unit_singular_values() {
        let r = svd(&DenseMatrix::identity(3)).unwrap();
        assert_eq!(r.s, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn diagonal_is_sorted_without_permutation() {
        let r = svd(&DenseMatrix::diag(&[3.0, 2.0, 1.0])).unwrap();
        assert_eq!(r.s, vec![3.0, 2.0, 1.0]);
        assert_eq!(r.u, DenseMatrix::identity(3));
        assert_eq!(r.vt, DenseMatrix::identity(3));
    }

    #[test]
    fn wide_and_zero_matrices() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![2.0, 4.0, 6.0]]).unwrap();
        let r = svd(&a).unwrap();
        assert_eq!(r.u.shape(), (2, 2));
        assert_eq!(r.vt.shape(), (2, 3));
        assert_eq!(r.numerical_rank(), 1);
        assert!(r.u.orthonormality_defect() < 1e-12);
        assert!(r.reconstruct().sub(&a).unwrap().frobenius_norm() < 1e-12);

        let z = svd(&DenseMatrix::zeros(3, 2)).unwrap();
        assert_eq!(z.s, vec![0.0, 0.0]);
        assert!(z.u.orthonormality_defect() < 1e-15);
        assert_eq!(z.numerical_rank(), 0);
    }

    #[test]
    fn rejects_non_finite() {
        let mut a = DenseMatrix::zeros(2, 2);
        a.data_mut()[0] = f64::INFINITY;
        assert!(matches!(svd(&a), Err(Error::NonFinite(_))));
    }
}
