//! Dense double-precision linear algebra: matrices, SVD, orthonormal bases,
//! principal angles and minimum-norm least squares.
//!
//! Everything here is a pure function of its inputs.

mod matrix;
mod svd;
pub mod vecops;

pub use matrix::{DenseMatrix, DenseVector};
pub use svd::{spectral_norm, svd, SvdResult, RANK_TOL};

use crate::error::{dim_err, Error, Result};

/// Tolerance on `qᵀq − I` (max-abs) for inputs claimed to be orthonormal.
pub const ORTHONORMAL_TOL: f64 = 1e-8;

/// Orthonormal basis of the column space of `a`, keeping left singular
/// vectors whose singular value is at least `tol · s_max`.
///
/// A rank-0 input yields a `rows × 0` matrix.
pub fn orthonormal_basis(a: &DenseMatrix, tol: f64) -> Result<DenseMatrix> {
    let r = svd(a)?;
    let smax = r.max_singular();
    if smax <= 0.0 {
        return Ok(DenseMatrix::zeros(a.rows(), 0));
    }
    let keep = r.s.iter().take_while(|&&s| s >= tol * smax && s > 0.0).count();
    Ok(r.u.leading_columns(keep))
}

/// Principal angles between `span(q1)` and `span(q2)`, both with orthonormal
/// columns. Returns `min(k1, k2)` angles in `[0, π/2]`, non-decreasing.
///
/// Cosines come from the singular values of `q1ᵀq2`; small angles are
/// recovered from the sines (singular values of the residual
/// `q2 − q1 q1ᵀ q2`) so that nearly coincident subspaces report angles near
/// machine precision rather than `sqrt(eps)`.
pub fn principal_angles(q1: &DenseMatrix, q2: &DenseMatrix) -> Result<DenseVector> {
    if q1.rows() != q2.rows() {
        return Err(dim_err("principal_angles", q1.rows(), q2.rows()));
    }
    for (name, q) in [("q1", q1), ("q2", q2)] {
        let defect = q.orthonormality_defect();
        if defect > ORTHONORMAL_TOL {
            return Err(Error::Precondition(format!(
                "{name} columns are not orthonormal (max |qᵀq − I| = {defect:e})"
            )));
        }
    }
    // The wider basis goes first so the residual below has the right rank.
    let (a, b) = if q1.cols() >= q2.cols() { (q1, q2) } else { (q2, q1) };
    let k = b.cols();
    if k == 0 {
        return Ok(Vec::new());
    }
    let cross = a.t_matmul(b)?;
    let cos = svd(&cross)?.s;
    let resid = b.sub(&a.matmul(&cross)?)?;
    let mut sin = svd(&resid)?.s;
    sin.sort_by(f64::total_cmp);

    Ok((0..k)
        .map(|i| {
            let c = cos[i].clamp(0.0, 1.0);
            if c * c >= 0.5 {
                sin[i].clamp(0.0, 1.0).asin()
            } else {
                c.acos()
            }
        })
        .collect())
}

/// Moore–Penrose pseudo-inverse with singular values below
/// `RANK_TOL · s_max` truncated.
pub fn pinv(a: &DenseMatrix) -> Result<DenseMatrix> {
    let r = svd(a)?;
    let smax = r.max_singular();
    let inv: Vec<f64> = r
        .s
        .iter()
        .map(|&s| if smax > 0.0 && s > RANK_TOL * smax { 1.0 / s } else { 0.0 })
        .collect();
    // a⁺ = V Σ⁺ Uᵀ
    r.vt.transpose().scale_cols(&inv)?.matmul_t(&r.u)
}

/// Minimum-norm `X` minimizing `‖X·a − b‖_F`, i.e. `X = b·a⁺`.
///
/// `a` is `m × n`, `b` is `p × n`; the result is `p × m`.
pub fn least_squares(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if !a.is_finite() || !b.is_finite() {
        return Err(Error::NonFinite("least_squares"));
    }
    if a.cols() != b.cols() {
        return Err(dim_err("least_squares", format!("b with {} columns", a.cols()), b.cols()));
    }
    b.matmul(&pinv(a)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_2;

    fn e(n: usize, i: usize) -> DenseVector {
        let mut v = vec![0.0; n];
        v[i] = 1.0;
        v
    }

    #[test]
    fn basis_of_rank_one_diagonal() {
        let a = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let v = orthonormal_basis(&a, RANK_TOL).unwrap();
        assert_eq!(v.shape(), (2, 1));
        assert!((v[(0, 0)].abs() - 1.0).abs() < 1e-15);
        assert_eq!(v[(1, 0)], 0.0);
    }

    #[test]
    fn basis_of_duplicate_columns() {
        let a = DenseMatrix::from_rows(&[vec![1.0, 1.0], vec![2.0, 2.0], vec![-1.0, -1.0]]).unwrap();
        assert_eq!(orthonormal_basis(&a, RANK_TOL).unwrap().cols(), 1);
        assert_eq!(orthonormal_basis(&DenseMatrix::zeros(3, 2), RANK_TOL).unwrap().shape(), (3, 0));
    }

    #[test]
    fn identical_subspaces_have_zero_angles() {
        let q = DenseMatrix::from_columns(&[e(4, 0), e(4, 2)]).unwrap();
        let angles = principal_angles(&q, &q).unwrap();
        assert_eq!(angles, vec![0.0, 0.0]);
    }

    #[test]
    fn one_shared_one_orthogonal_direction() {
        let q1 = DenseMatrix::from_columns(&[e(3, 0), e(3, 1)]).unwrap();
        let q2 = DenseMatrix::from_columns(&[e(3, 0), e(3, 2)]).unwrap();
        let angles = principal_angles(&q1, &q2).unwrap();
        assert!(angles[0].abs() < 1e-15);
        assert!((angles[1] - FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn non_orthonormal_input_is_rejected() {
        let q1 = DenseMatrix::from_columns(&[vec![2.0, 0.0, 0.0]]).unwrap();
        let q2 = DenseMatrix::from_columns(&[e(3, 0)]).unwrap();
        assert!(matches!(principal_angles(&q1, &q2), Err(Error::Precondition(_))));
    }

    #[test]
    fn least_squares_identity_returns_rhs() {
        let b = DenseMatrix::from_rows(&[vec![1.0, 2.0, 3.0], vec![-1.0, 0.5, 4.0]]).unwrap();
        let x = least_squares(&DenseMatrix::identity(3), &b).unwrap();
        assert!(x.sub(&b).unwrap().max_abs() < 1e-15);
    }

    #[test]
    fn least_squares_row_mismatch_is_an_error() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 4);
        assert!(least_squares(&a, &b).is_err());
    }
}
