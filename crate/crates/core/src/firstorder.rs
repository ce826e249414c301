//! Jacobians of the GLU and plain MLP, and the comparison between a small
//! activation shift and a small weight change to first order.

use serde::{Deserialize, Serialize};

use crate::adapters::{Locus, SteeringAdapter};
use crate::error::{dim_err, Error, Result};
use crate::nanomodel::{glu_activations, glu_forward, Activation, GluParams};
use crate::numkit::{least_squares, vecops, DenseMatrix, DenseVector};

/// Scales applied to the perturbation direction.
pub const EPSILON_GRID: [f64; 4] = [1e-1, 1e-2, 1e-3, 1e-4];

/// Perturbations larger than this are outside the first-order regime.
pub const MAX_PERTURBATION_NORM: f64 = 1e-1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FirstOrderReport {
    pub epsilon_grid: Vec<f64>,
    /// `‖exact − linear‖ / ‖linear‖` for the activation shift, per ε.
    pub steer_residual: Vec<f64>,
    /// Same for the weight change.
    pub ft_residual: Vec<f64>,
    /// `‖ΔW_d · m‖` at ε = 1.
    pub mismatch_term_norm: f64,
    /// Log-log slope of the residual against ε, fitted without the largest ε.
    /// `None` when a residual is exactly zero.
    pub steer_slope: Option<f64>,
    pub ft_slope: Option<f64>,
}

/// `A_GLU(h) = W_d [Diag(φ(a_g)) W_u + Diag(a_u ⊙ φ'(a_g)) W_g]`.
pub fn glu_jacobian(p: &GluParams, h: &[f64]) -> Result<DenseMatrix> {
    let acts = glu_activations(p, h)?;
    let dphi = p.phi.derivative_vec(&acts.a_g);
    let gated = vecops::hadamard(&acts.a_u, &dphi);
    let inner = p.w_u.scale_rows(&acts.gate)?.add(&p.w_g.scale_rows(&gated)?)?;
    p.w_d.matmul(&inner)
}

/// `A(h) = W₂ Diag(φ'(W₁h)) W₁` for the map `h ↦ W₂ φ(W₁ h)`.
pub fn mlp_jacobian(w1: &DenseMatrix, w2: &DenseMatrix, phi: Activation, h: &[f64]) -> Result<DenseMatrix> {
    if w2.cols() != w1.rows() {
        return Err(dim_err("mlp_jacobian", w1.rows(), w2.cols()));
    }
    let z = w1.matvec(h)?;
    w2.matmul(&w1.scale_rows(&phi.derivative_vec(&z))?)
}

/// `W₂ φ(W₁ h)`.
pub fn mlp_forward(w1: &DenseMatrix, w2: &DenseMatrix, phi: Activation, h: &[f64]) -> Result<DenseVector> {
    w2.matvec(&phi.apply_vec(&w1.matvec(h)?))
}

fn check_perturbation(name: &'static str, norm: f64) -> Result<()> {
    if !norm.is_finite() {
        return Err(Error::NonFinite(name));
    }
    // Allow rounding when a perturbation was scaled to exactly the limit.
    if norm > MAX_PERTURBATION_NORM * (1.0 + 1e-12) {
        return Err(Error::Precondition(format!(
            "{name} has norm {norm:e}, above the first-order limit {MAX_PERTURBATION_NORM}"
        )));
    }
    Ok(())
}

fn relative(exact: &[f64], linear: &[f64]) -> f64 {
    let num = vecops::distance(exact, linear);
    let den = vecops::norm(linear);
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Least-squares slope of `ln r` against `ln ε`.
pub fn loglog_slope(eps: &[f64], r: &[f64]) -> Option<f64> {
    if eps.len() != r.len() || eps.len() < 2 || r.iter().any(|&x| !(x > 0.0) || !x.is_finite()) {
        return None;
    }
    let xs: Vec<f64> = eps.iter().map(|e| e.ln()).collect();
    let ys: Vec<f64> = r.iter().map(|e| e.ln()).collect();
    let mx = vecops::mean(&xs);
    let my = vecops::mean(&ys);
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    Some(sxy / sxx)
}

/// Exact change of the GLU output when the weights move by the given deltas,
/// written so that no large terms cancel:
/// `W_d(m' − m) + ΔW_d m'` with
/// `m' − m = (φ(a_g') − φ(a_g)) ⊙ a_u' + φ(a_g) ⊙ (ΔW_u h)`.
pub fn glu_weight_delta(
    p: &GluParams,
    h: &[f64],
    dwg: &DenseMatrix,
    dwu: &DenseMatrix,
    dwd: &DenseMatrix,
) -> Result<DenseVector> {
    let base = glu_activations(p, h)?;
    let dag = dwg.matvec(h)?;
    let dau = dwu.matvec(h)?;
    let ag2 = vecops::add(&base.a_g, &dag);
    let au2 = vecops::add(&base.a_u, &dau);
    let gate2 = p.phi.apply_vec(&ag2);
    let dgate: DenseVector = if dag.iter().all(|&x| x == 0.0) {
        vec![0.0; ag2.len()]
    } else {
        vecops::sub(&gate2, &base.gate)
    };
    let dm = vecops::add(&vecops::hadamard(&dgate, &au2), &vecops::hadamard(&base.gate, &dau));
    let m2 = vecops::hadamard(&gate2, &au2);
    Ok(vecops::add(&p.w_d.matvec(&dm)?, &dwd.matvec(&m2)?))
}

/// First-order predictions for both perturbations plus their exact values
/// over [`EPSILON_GRID`].
pub fn steer_vs_ft_expansion(
    p: &GluParams,
    h: &[f64],
    dh: &[f64],
    dwg: &DenseMatrix,
    dwu: &DenseMatrix,
    dwd: &DenseMatrix,
) -> Result<FirstOrderReport> {
    p.validate()?;
    let d = p.d_model();
    let k = p.d_mlp();
    vecops::check_len("steer_vs_ft_expansion h", h, d)?;
    vecops::check_len("steer_vs_ft_expansion dh", dh, d)?;
    for (name, m, shape) in [("dwg", dwg, (k, d)), ("dwu", dwu, (k, d)), ("dwd", dwd, (d, k))] {
        if m.shape() != shape {
            return Err(dim_err(name, format!("{shape:?}"), format!("{:?}", m.shape())));
        }
    }
    check_perturbation("dh", vecops::norm(dh))?;
    check_perturbation("dwg", dwg.frobenius_norm())?;
    check_perturbation("dwu", dwu.frobenius_norm())?;
    check_perturbation("dwd", dwd.frobenius_norm())?;

    let acts = glu_activations(p, h)?;
    let dphi = p.phi.derivative_vec(&acts.a_g);
    let gated = vecops::hadamard(&dphi, &acts.a_u);
    // Both expansions share the bracket W_d[(φ'(a_g)⊙a_u)⊙(·)_g + φ(a_g)⊙(·)_u].
    let bracket = |g_in: &[f64], u_in: &[f64]| -> Result<DenseVector> {
        let inner = vecops::add(&vecops::hadamard(&gated, g_in), &vecops::hadamard(&acts.gate, u_in));
        p.w_d.matvec(&inner)
    };
    let steer_lin1 = bracket(&p.w_g.matvec(dh)?, &p.w_u.matvec(dh)?)?;
    let dwd_m = dwd.matvec(&acts.m)?;
    let ft_lin1 = vecops::add(&bracket(&dwg.matvec(h)?, &dwu.matvec(h)?)?, &dwd_m);

    let mut steer_residual = Vec::with_capacity(EPSILON_GRID.len());
    let mut ft_residual = Vec::with_capacity(EPSILON_GRID.len());
    for &eps in &EPSILON_GRID {
        let shifted = vecops::add(h, &vecops::scale(dh, eps));
        let steer_exact = vecops::sub(&glu_forward(p, &shifted)?, &acts.out);
        steer_residual.push(relative(&steer_exact, &vecops::scale(&steer_lin1, eps)));

        let ft_exact = glu_weight_delta(p, h, &dwg.scale(eps), &dwu.scale(eps), &dwd.scale(eps))?;
        ft_residual.push(relative(&ft_exact, &vecops::scale(&ft_lin1, eps)));
    }
    let steer_slope = loglog_slope(&EPSILON_GRID[1..], &steer_residual[1..]);
    let ft_slope = loglog_slope(&EPSILON_GRID[1..], &ft_residual[1..]);
    Ok(FirstOrderReport {
        epsilon_grid: EPSILON_GRID.to_vec(),
        steer_residual,
        ft_residual,
        mismatch_term_norm: vecops::norm(&dwd_m),
        steer_slope,
        ft_slope,
    })
}

/// Outcome of fitting a linear post-MLP adapter to a weight change.
#[derive(Clone, Debug)]
pub struct PostMlpFit {
    pub adapter: SteeringAdapter,
    /// `‖M·X − Δ‖_F / ‖GLU_FT(H)‖_F`, relative to the fine-tuned MLP output.
    pub residual: f64,
    /// `‖M·X − Δ‖_F / ‖Δ‖_F`, relative to the change itself (0 when Δ = 0).
    pub residual_of_change: f64,
}

fn perturbed(p: &GluParams, dwg: &DenseMatrix, dwu: &DenseMatrix, dwd: &DenseMatrix) -> Result<GluParams> {
    let mut q = p.clone();
    q.w_g = q.w_g.add(dwg)?;
    q.w_u = q.w_u.add(dwu)?;
    q.w_d = q.w_d.add(dwd)?;
    q.validate()?;
    Ok(q)
}

fn ratio(num: f64, den: f64) -> f64 {
    if den > 0.0 {
        num / den
    } else {
        num
    }
}

/// Least-squares full-matrix post-MLP adapter `x ↦ x + M x` reproducing the
/// fine-tuned MLP output on the sample.
pub fn ft_match_by_postmlp(
    p: &GluParams,
    dwg: &DenseMatrix,
    dwu: &DenseMatrix,
    dwd: &DenseMatrix,
    hs: &[DenseVector],
) -> Result<PostMlpFit> {
    if hs.is_empty() {
        return Err(Error::Precondition("ft_match_by_postmlp needs at least one sample".into()));
    }
    let q = perturbed(p, dwg, dwu, dwd)?;
    let mut xs = Vec::with_capacity(hs.len());
    let mut deltas = Vec::with_capacity(hs.len());
    let mut ft_outs = Vec::with_capacity(hs.len());
    for h in hs {
        xs.push(glu_forward(p, h)?);
        deltas.push(glu_weight_delta(p, h, dwg, dwu, dwd)?);
        ft_outs.push(glu_forward(&q, h)?);
    }
    let x = DenseMatrix::from_columns(&xs)?;
    let delta = DenseMatrix::from_columns(&deltas)?;
    let m = least_squares(&x, &delta)?;
    let err = m.matmul(&x)?.sub(&delta)?.frobenius_norm();
    let ft_norm = DenseMatrix::from_columns(&ft_outs)?.frobenius_norm();
    Ok(PostMlpFit {
        adapter: SteeringAdapter::full(Locus::PostMlp, m)?,
        residual: ratio(err, ft_norm),
        residual_of_change: ratio(err, delta.frobenius_norm()),
    })
}

/// Companion fit for a linear pre-MLP adapter `h ↦ h + M h`.
///
/// `M` solves the linearized problem `A_GLU(h_i) M h_i ≈ Δ_i`; the returned
/// residual is then measured on the exact map `GLU(h + M h)` with the same
/// normalization as [`ft_match_by_postmlp`].
pub fn ft_match_by_premlp(
    p: &GluParams,
    dwg: &DenseMatrix,
    dwu: &DenseMatrix,
    dwd: &DenseMatrix,
    hs: &[DenseVector],
) -> Result<PostMlpFit> {
    if hs.is_empty() {
        return Err(Error::Precondition("ft_match_by_premlp needs at least one sample".into()));
    }
    let d = p.d_model();
    let q = perturbed(p, dwg, dwu, dwd)?;
    // Row (i, r) of the design: ∂(A_i M h_i)_r / ∂M_{jk} = A_i[r, j] h_i[k].
    let mut design_cols: Vec<DenseVector> = Vec::with_capacity(hs.len() * d);
    let mut rhs = Vec::with_capacity(hs.len() * d);
    for h in hs {
        let a = glu_jacobian(p, h)?;
        let delta = glu_weight_delta(p, h, dwg, dwu, dwd)?;
        for r in 0..d {
            let mut col = Vec::with_capacity(d * d);
            for j in 0..d {
                for &hk in h.iter() {
                    col.push(a[(r, j)] * hk);
                }
            }
            design_cols.push(col);
            rhs.push(delta[r]);
        }
    }
    let design = DenseMatrix::from_columns(&design_cols)?;
    let target = DenseMatrix::from_rows(&[rhs])?;
    let flat = least_squares(&design, &target)?;
    let m = DenseMatrix::new(d, d, flat.into_data())?;

    let mut err_sq = 0.0;
    let mut delta_sq = 0.0;
    let mut ft_sq = 0.0;
    for h in hs {
        let steered = vecops::add(h, &m.matvec(h)?);
        let ft = glu_forward(&q, h)?;
        let delta = glu_weight_delta(p, h, dwg, dwu, dwd)?;
        let got = vecops::sub(&glu_forward(p, &steered)?, &glu_forward(p, h)?);
        err_sq += vecops::distance(&got, &delta).powi(2);
        delta_sq += vecops::norm(&delta).powi(2);
        ft_sq += vecops::norm(&ft).powi(2);
    }
    Ok(PostMlpFit {
        adapter: SteeringAdapter::full(Locus::PreMlp, m)?,
        residual: ratio(err_sq.sqrt(), ft_sq.sqrt()),
        residual_of_change: ratio(err_sq.sqrt(), delta_sq.sqrt()),
    })
}

/// Central-difference Jacobian of `f` at `h` with step `step`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Result<DenseVector>, h: &[f64], step: f64) -> Result<DenseMatrix> {
    let out = f(h)?.len();
    let mut j = DenseMatrix::zeros(out, h.len());
    let mut x = h.to_vec();
    for c in 0..h.len() {
        x[c] = h[c] + step;
        let plus = f(&x)?;
        x[c] = h[c] - step;
        let minus = f(&x)?;
        x[c] = h[c];
        let col: DenseVector = plus.iter().zip(&minus).map(|(a, b)| (a - b) / (2.0 * step)).collect();
        j.set_col(c, &col);
    }
    Ok(j)
}
