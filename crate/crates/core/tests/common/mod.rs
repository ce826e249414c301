//! Independent reference implementations used as test oracles. None of
//! these call into the library's linear algebra.

#![allow(dead_code)]

use steerkit::numkit::DenseMatrix;

pub type Mat = Vec<Vec<f64>>;

pub fn to_rows(m: &DenseMatrix) -> Mat {
    (0..m.rows()).map(|i| m.row(i).to_vec()).collect()
}

pub fn from_rows(m: &Mat) -> DenseMatrix {
    DenseMatrix::from_rows(m).unwrap()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

pub fn fro(m: &Mat) -> f64 {
    m.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn transpose(m: &Mat) -> Mat {
    if m.is_empty() {
        return Vec::new();
    }
    (0..m[0].len()).map(|j| m.iter().map(|r| r[j]).collect()).collect()
}

pub fn mul(a: &Mat, b: &Mat) -> Mat {
    let bt = transpose(b);
    a.iter().map(|r| bt.iter().map(|c| dot(r, c)).collect()).collect()
}

pub fn sub(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p - q).collect())
        .collect()
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

/// Central differences, one coordinate at a time.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Mat {
    let m = f(x).len();
    let mut cols = Vec::new();
    for j in 0..x.len() {
        let mut xp = x.to_vec();
        let mut xm = x.to_vec();
        xp[j] += h;
        xm[j] -= h;
        let (fp, fm) = (f(&xp), f(&xm));
        cols.push((0..m).map(|i| (fp[i] - fm[i]) / (2.0 * h)).collect::<Vec<_>>());
    }
    transpose(&cols)
}

/// Cyclic Jacobi eigenvalues of a symmetric matrix, sorted descending.
pub fn jacobi_eigenvalues(sym: &Mat) -> Vec<f64> {
    let n = sym.len();
    let mut a = sym.clone();
    for _ in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        if off < 1e-30 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| a[i][i]).collect();
    ev.sort_by(|x, y| y.partial_cmp(x).unwrap());
    ev
}

/// Modified Gram–Schmidt on the columns of `m`, dropping dependent ones.
pub fn gram_schmidt(m: &Mat) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for col in transpose(m) {
        let mut v = col.clone();
        for _ in 0..2 {
            for q in &basis {
                let c = dot(&v, q);
                for (vi, qi) in v.iter_mut().zip(q) {
                    *vi -= c * qi;
                }
            }
        }
        let n = norm(&v);
        if n > 1e-10 * norm(&col).max(1e-300) {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis
}

/// Frobenius norm of the part of `w`'s columns orthogonal to `span(b)`.
pub fn orthogonal_component_norm(w: &Mat, b: &Mat) -> f64 {
    let q = gram_schmidt(b);
    let mut total = 0.0;
    for col in transpose(w) {
        let mut v = col.clone();
        for qi in &q {
            let c = dot(&v, qi);
            for (vi, qq) in v.iter_mut().zip(qi) {
                *vi -= c * qq;
            }
        }
        total += dot(&v, &v);
    }
    total.sqrt()
}

/// Principal angles by brute force: the largest cosine between unit vectors
/// of the two subspaces, found by random restarts plus alternating
/// refinement, then deflated.
pub fn brute_force_angles(q1: &Mat, q2: &Mat, seed: u64) -> Vec<f64> {
    let b1 = gram_schmidt(q1);
    let b2 = gram_schmidt(q2);
    let k = b1.len().min(b2.len());
    let mut state = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    let mut rand = move || {
        state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((state >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    };
    let combine = |basis: &[Vec<f64>], c: &[f64]| -> Vec<f64> {
        let n = basis[0].len();
        let mut v = vec![0.0; n];
        for (b, ci) in basis.iter().zip(c) {
            for (vi, bi) in v.iter_mut().zip(b) {
                *vi += ci * bi;
            }
        }
        v
    };
    let project = |basis: &[Vec<f64>], x: &[f64]| -> Vec<f64> { basis.iter().map(|b| dot(b, x)).collect() };
    let mut found_u: Vec<Vec<f64>> = Vec::new();
    let mut found_v: Vec<Vec<f64>> = Vec::new();
    let mut angles = Vec::new();
    for _ in 0..k {
        let deflate = |v: &mut Vec<f64>, prev: &[Vec<f64>]| {
            for p in prev {
                let c = dot(v, p);
                for (vi, pi) in v.iter_mut().zip(p) {
                    *vi -= c * pi;
                }
            }
        };
        let mut best = (-1.0, Vec::new(), Vec::new());
        for _ in 0..20 {
            let c: Vec<f64> = (0..b1.len()).map(|_| rand()).collect();
            let mut u = combine(&b1, &c);
            deflate(&mut u, &found_u);
            let mut v = vec![0.0; u.len()];
            for _ in 0..500 {
                let nu = norm(&u);
                if nu < 1e-300 {
                    break;
                }
                u.iter_mut().for_each(|x| *x /= nu);
                v = combine(&b2, &project(&b2, &u));
                deflate(&mut v, &found_v);
                let nv = norm(&v);
                v.iter_mut().for_each(|x| *x /= nv);
                u = combine(&b1, &project(&b1, &v));
                deflate(&mut u, &found_u);
            }
            let nu = norm(&u);
            u.iter_mut().for_each(|x| *x /= nu);
            let cos = dot(&u, &v).abs();
            if cos > best.0 {
                best = (cos, u, v);
            }
        }
        angles.push(best.0.min(1.0).acos());
        found_u.push(best.1);
        found_v.push(best.2);
    }
    angles.sort_by(|a, b| a.partial_cmp(b).unwrap());
    angles
}

/// Minimizes `‖A·Z − T‖_F²` over `A` by gradient descent from zero with a
/// step of `1/λ_max(ZZᵀ)` (λ_max by power iteration); returns the relative
/// error `‖A·Z − T‖² / ‖T‖²`.
pub fn gd_least_squares_error(z: &Mat, t: &Mat, iters: usize) -> f64 {
    let zt = transpose(z);
    let zzt = mul(z, &zt);
    let d = zzt.len();
    let mut v = vec![1.0; d];
    let mut lambda = 0.0;
    for _ in 0..500 {
        let w: Vec<f64> = zzt.iter().map(|r| dot(r, &v)).collect();
        lambda = norm(&w);
        v = w.iter().map(|x| x / lambda).collect();
    }
    let step = 1.0 / lambda;
    let tzt = mul(t, &zt);
    let mut a = vec![vec![0.0; d]; t.len()];
    for _ in 0..iters {
        // ∇ = (A ZZᵀ − T Zᵀ), scaled by the step.
        let g = sub(&mul(&a, &zzt), &tzt);
        for (ar, gr) in a.iter_mut().zip(&g) {
            for (x, y) in ar.iter_mut().zip(gr) {
                *x -= step * y;
            }
        }
    }
    let r = sub(&mul(&a, z), t);
    fro(&r).powi(2) / fro(t).powi(2)
}

/// Sigmoid evaluated directly.
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
