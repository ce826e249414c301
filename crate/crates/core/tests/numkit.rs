mod common;

use common::*;
use proptest::prelude::*;
use steerkit::numkit::{least_squares, orthonormal_basis, principal_angles, svd, DenseMatrix, RANK_TOL};
use steerkit::rng;

fn matrix_strategy(max_rows: usize, max_cols: usize) -> impl Strategy<Value = DenseMatrix> {
    (1..=max_rows, 1..=max_cols, any::<u64>())
        .prop_map(|(r, c, seed)| rng::gaussian_matrix(r, c, 1.0, &mut rng::seeded(seed)))
}

#[test]
fn svd_matches_jacobi_eigenvalues_of_gram() {
    let a = rng::gaussian_matrix(8, 5, 1.0, &mut rng::seeded(11));
    let r = svd(&a).unwrap();
    let recon = r.reconstruct().sub(&a).unwrap().frobenius_norm();
    assert!(recon <= 1e-10, "reconstruction residual {recon:e}");

    let rows = to_rows(&a);
    let gram = mul(&transpose(&rows), &rows);
    let ev = jacobi_eigenvalues(&gram);
    for (s, e) in r.s.iter().zip(&ev) {
        assert!((s * s - e).abs() <= 1e-10 * ev[0], "{} vs {}", s * s, e);
    }
}

#[test]
fn basis_reproduces_full_rank_input() {
    let a = rng::gaussian_matrix(6, 3, 1.0, &mut rng::seeded(3));
    let v = orthonormal_basis(&a, RANK_TOL).unwrap();
    assert_eq!(v.cols(), 3);
    let proj = v.matmul(&v.t_matmul(&a).unwrap()).unwrap();
    assert!(proj.sub(&a).unwrap().frobenius_norm() <= 1e-10);
}

#[test]
fn principal_angles_match_brute_force() {
    for seed in 0..3 {
        let mut r = rng::seeded(100 + seed);
        let q1 = rng::orthonormal_matrix(10, 4, &mut r);
        let q2 = rng::orthonormal_matrix(10, 4, &mut r);
        let fast = principal_angles(&q1, &q2).unwrap();
        let slow = brute_force_angles(&to_rows(&q1), &to_rows(&q2), seed);
        for (a, b) in fast.iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-4, "{fast:?} vs {slow:?}");
        }
    }
}

#[test]
fn least_squares_on_rank_deficient_input() {
    let mut r = rng::seeded(7);
    // rank 2, shape 5 × 9
    let a = rng::gaussian_matrix(5, 2, 1.0, &mut r)
        .matmul(&rng::gaussian_matrix(2, 9, 1.0, &mut r))
        .unwrap();
    let b = rng::gaussian_matrix(3, 9, 1.0, &mut r);
    let x = least_squares(&a, &b).unwrap();
    let resid = x.matmul(&a).unwrap().sub(&b).unwrap().frobenius_norm();

    // Oracle: the optimal residual is b's component off the row space of a.
    let q = gram_schmidt(&transpose(&to_rows(&a)));
    assert_eq!(q.len(), 2);
    let mut expected = 0.0;
    for row in to_rows(&b) {
        let mut v = row.clone();
        for qi in &q {
            let c = dot(&v, qi);
            v.iter_mut().zip(qi).for_each(|(x, y)| *x -= c * y);
        }
        expected += dot(&v, &v);
    }
    assert!((resid - expected.sqrt()).abs() <= 1e-10, "{resid} vs {}", expected.sqrt());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn svd_gram_identity(a in matrix_strategy(64, 64)) {
        let r = svd(&a).unwrap();
        let v = r.vt.transpose();
        let s2: Vec<f64> = r.s.iter().map(|s| s * s).collect();
        let vsv = v.scale_cols(&s2).unwrap().matmul_t(&v).unwrap();
        let ata = a.t_matmul(&a).unwrap();
        let err = ata.sub(&vsv).unwrap().frobenius_norm();
        prop_assert!(err <= 1e-8 * a.frobenius_norm_sq());
    }

    #[test]
    fn angles_symmetric_and_rotation_invariant(n in 3usize..12, k in 1usize..4, seed in any::<u64>()) {
        let k = k.min(n - 1);
        let mut r = rng::seeded(seed);
        let q1 = rng::orthonormal_matrix(n, k, &mut r);
        let q2 = rng::orthonormal_matrix(n, k, &mut r);
        let rot = rng::orthonormal_matrix(k, k, &mut r);
        let a = principal_angles(&q1, &q2).unwrap();
        let b = principal_angles(&q2, &q1).unwrap();
        let c = principal_angles(&q1.matmul(&rot).unwrap(), &q2).unwrap();
        for i in 0..k {
            prop_assert!((a[i] - b[i]).abs() <= 1e-10);
            prop_assert!((a[i] - c[i]).abs() <= 1e-10);
        }
    }

    #[test]
    fn least_squares_is_locally_optimal(m in 1usize..8, n in 1usize..16, p in 1usize..5, seed in any::<u64>()) {
        let mut r = rng::seeded(seed);
        let a = rng::gaussian_matrix(m, n, 1.0, &mut r);
        let b = rng::gaussian_matrix(p, n, 1.0, &mut r);
        let x = least_squares(&a, &b).unwrap();
        let obj = |x: &DenseMatrix| x.matmul(&a).unwrap().sub(&b).unwrap().frobenius_norm_sq();
        let dir = rng::gaussian_matrix(p, m, 1.0, &mut r);
        let dir = dir.scale(1e-3 / dir.frobenius_norm());
        prop_assert!(obj(&x) <= obj(&x.add(&dir).unwrap()) + 1e-12);
    }
}
