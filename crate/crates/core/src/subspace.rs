//! Subspace analysis of where a linear intervention can sit: the optimal
//! post-block error in terms of principal angles, the oblique-projection
//! transfer map, fine-tuning oracles and fits, and the early-training
//! collapse simulation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::adapters::project_out;
use crate::error::{dim_err, Error, Result};
use crate::nanomodel::{self, AttnParams, BlockOptions, BlockTrace, GluParams, TraceSite};
use crate::numkit::{
    least_squares, orthonormal_basis, pinv, principal_angles, spectral_norm, svd, vecops, DenseMatrix, DenseVector,
    RANK_TOL,
};
use crate::rng;

/// Smallest principal angle accepted as a trivial intersection.
pub const MIN_SEPARATION_ANGLE: f64 = 1e-6;

/// The exact shift that turns base hidden states into fine-tuned ones at one site.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleTarget {
    pub site: TraceSite,
    pub delta: Vec<DenseVector>,
}

fn check_same_shape(op: &'static str, a: &[DenseVector], b: &[DenseVector]) -> Result<()> {
    if a.len() != b.len() {
        return Err(dim_err(op, format!("{} positions", a.len()), b.len()));
    }
    for (x, y) in a.iter().zip(b) {
        if x.len() != y.len() {
            return Err(dim_err(op, x.len(), y.len()));
        }
    }
    Ok(())
}

/// `delta_i = ft_i − base_i` at `site`.
pub fn compute_oracle(base: &BlockTrace, ft: &BlockTrace, site: TraceSite) -> Result<OracleTarget> {
    check_same_shape("compute_oracle", &base.h_in, &ft.h_in)?;
    let b = base.site(site);
    let f = ft.site(site);
    check_same_shape("compute_oracle", b, f)?;
    Ok(OracleTarget {
        site,
        delta: b.iter().zip(f).map(|(b, f)| vecops::sub(f, b)).collect(),
    })
}

impl OracleTarget {
    /// Adds the oracle back onto the base states.
    pub fn apply(&self, base: &BlockTrace) -> Result<Vec<DenseVector>> {
        let b = base.site(self.site);
        check_same_shape("OracleTarget::apply", b, &self.delta)?;
        Ok(b.iter().zip(&self.delta).map(|(b, d)| vecops::add(b, d)).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrincipalAngleReport {
    /// Non-zero singular values of `A_p·X`.
    pub sigma: DenseVector,
    /// Angle between the i-th right singular vector of `A_p·X` and the row
    /// space of `X + Y`.
    pub angles: DenseVector,
    /// `Σ σ_i² sin²θ_i / Σ σ_j²`.
    pub predicted_error: f64,
    /// `‖A*(X+Y) − A_p X‖² / ‖A_p X‖²` at the closed-form minimizer.
    pub measured_error: f64,
    pub abs_gap: f64,
    /// Canonical principal angles between the two right-singular subspaces.
    pub canonical_angles: DenseVector,
    /// The weighted sum evaluated with the canonical angles paired to `σ_i`
    /// in sorted order. Equals `predicted_error` only when the pairing
    /// happens to align.
    pub canonical_predicted_error: f64,
    /// Numerical rank of `X + Y`.
    pub rank_xy: usize,
    /// `(X+Y)(X+Y)ᵀ` was singular and the pseudo-inverse was used.
    pub rank_deficient: bool,
}

/// Optimal relative error of a post-block linear map reproducing `A_p·X`
/// from `X + Y`, both in closed form and through singular values and angles.
pub fn theorem1_error(x: &DenseMatrix, y: &DenseMatrix, a_p: &DenseMatrix) -> Result<PrincipalAngleReport> {
    if x.shape() != y.shape() {
        return Err(dim_err("theorem1_error", format!("{:?}", x.shape()), format!("{:?}", y.shape())));
    }
    if a_p.cols() != x.rows() {
        return Err(dim_err("theorem1_error a_p", x.rows(), a_p.cols()));
    }
    let target = a_p.matmul(x)?;
    let target_sq = target.frobenius_norm_sq();
    if target_sq == 0.0 {
        return Err(Error::UndefinedRatio("A_p·X is zero".into()));
    }
    let z = x.add(y)?;

    // Closed form: A* = A_p X (X+Y)⁺.
    let a_star = target.matmul(&pinv(&z)?)?;
    let measured_error = a_star.matmul(&z)?.sub(&target)?.frobenius_norm_sq() / target_sq;

    let zs = svd(&z)?;
    let rank_xy = zs.numerical_rank();
    let v = zs.right_vectors(rank_xy);
    let ts = svd(&target)?;
    let rank_t = ts.numerical_rank();
    let sigma: DenseVector = ts.s[..rank_t].to_vec();
    let vp = ts.right_vectors(rank_t);

    let total: f64 = sigma.iter().map(|s| s * s).sum();
    let mut angles = Vec::with_capacity(rank_t);
    let mut weighted = 0.0;
    for (i, s) in sigma.iter().enumerate() {
        let col = vp.col(i);
        let coeff = v.t_matvec(&col)?;
        let resid = vecops::sub(&col, &v.matvec(&coeff)?);
        let sin = vecops::norm(&resid).min(1.0);
        let cos = vecops::norm(&coeff).min(1.0);
        angles.push(sin.atan2(cos));
        weighted += s * s * sin * sin;
    }
    let predicted_error = weighted / total;

    let canonical_angles = principal_angles(&vp, &v)?;
    let canonical_predicted_error = sigma
        .iter()
        .enumerate()
        .map(|(i, s)| s * s * canonical_angles.get(i).map_or(1.0, |t| t.sin().powi(2)))
        .sum::<f64>()
        / total;

    Ok(PrincipalAngleReport {
        sigma,
        angles,
        predicted_error,
        measured_error,
        abs_gap: (predicted_error - measured_error).abs(),
        canonical_angles,
        canonical_predicted_error,
        rank_xy,
        rank_deficient: rank_xy < z.rows(),
    })
}

/// `A_p · P_B`, where `P_B` projects onto `span(B)` along `span(A)`.
///
/// On vectors outside `span(A) ⊕ span(B)` the map acts on their orthogonal
/// projection onto that sum.
pub fn projection_transfer(a_p: &DenseMatrix, basis_a: &DenseMatrix, basis_b: &DenseMatrix) -> Result<DenseMatrix> {
    let d = a_p.cols();
    if basis_a.rows() != d || basis_b.rows() != d {
        return Err(dim_err("projection_transfer", d, format!("{} / {}", basis_a.rows(), basis_b.rows())));
    }
    let qa = orthonormal_basis(basis_a, RANK_TOL)?;
    let qb = orthonormal_basis(basis_b, RANK_TOL)?;
    if qb.cols() == 0 {
        return Ok(DenseMatrix::zeros(a_p.rows(), d));
    }
    if qa.cols() > 0 {
        let smallest = principal_angles(&qa, &qb)?.first().copied().unwrap_or(std::f64::consts::FRAC_PI_2);
        if smallest <= MIN_SEPARATION_ANGLE {
            return Err(Error::Precondition(format!(
                "span(A) and span(B) intersect (smallest principal angle {smallest:e})"
            )));
        }
    }
    let ka = qa.cols();
    let m = qa.hstack(&qb)?;
    let coeffs = pinv(&m)?;
    // Rows ka.. of M⁺ give the B-coordinates.
    let b_rows = DenseMatrix::from_fn(qb.cols(), d, |i, j| coeffs[(ka + i, j)]);
    a_p.matmul(&qb.matmul(&b_rows)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseConfig {
    pub steps: usize,
    pub lr: f64,
    pub with_orth: bool,
    /// Number of leading left singular directions of `δW` removed from `δh`
    /// when `with_orth` is set.
    #[serde(default = "default_orth_rank")]
    pub orth_rank: usize,
    /// Requested Gram size; capped by the ranks of both updates.
    #[serde(default = "default_gram_k")]
    pub gram_k: usize,
}

fn default_orth_rank() -> usize {
    1
}

fn default_gram_k() -> usize {
    8
}

impl Default for CollapseConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            lr: 1e-4,
            with_orth: false,
            orth_rank: 1,
            gram_k: 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    /// `gram[i][j] = ⟨u_i(δh), u_j(δW)⟩` for the top left singular vectors.
    pub gram: DenseMatrix,
    pub diag_mass: f64,
    pub offdiag_mass: f64,
    /// `|gram[0][0]|`, or 0 when either update vanished.
    pub top_cosine: f64,
    pub delta_h: DenseMatrix,
    pub delta_w: DenseMatrix,
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Largest `‖(I − U_Y U_Yᵀ)δh‖_F / ‖δh‖_F` seen over training, with `U_Y`
    /// spanning the columns of `X + W F`.
    pub max_escape_h: f64,
    pub max_escape_w: f64,
}

/// Gram matrix of the top-k left singular vectors of two matrices.
pub fn singular_gram(a: &DenseMatrix, b: &DenseMatrix, k: usize) -> Result<DenseMatrix> {
    let sa = svd(a)?;
    let sb = svd(b)?;
    let k = k.min(sa.numerical_rank()).min(sb.numerical_rank());
    sa.left_vectors(k).t_matmul(&sb.left_vectors(k))
}

fn gram_masses(g: &DenseMatrix) -> (f64, f64) {
    let k = g.rows();
    if k == 0 {
        return (0.0, 0.0);
    }
    let diag = (0..k).map(|i| g[(i, i)].abs()).sum::<f64>() / k as f64;
    let off = if k > 1 {
        let total: f64 = g.data().iter().map(|x| x.abs()).sum();
        (total - diag * k as f64) / (k * (k - 1)) as f64
    } else {
        0.0
    };
    (diag, off)
}

fn escape_ratio(m: &DenseMatrix, basis: &DenseMatrix) -> Result<f64> {
    let n = m.frobenius_norm();
    if n == 0.0 {
        return Ok(0.0);
    }
    Ok(project_out(m, basis)?.frobenius_norm() / n)
}

/// Gradient descent on `½‖G − (I + δh)(X + (W + δW) F)‖²_F` from zero.
///
/// Shapes: `x, g: d×n`, `f: p×n`, `w: d×p`. Both updates must stay within
/// `0.1·‖W‖_F`, the early-training regime.
pub fn simulate_collapse(
    x: &DenseMatrix,
    f: &DenseMatrix,
    w: &DenseMatrix,
    g_target: &DenseMatrix,
    cfg: &CollapseConfig,
) -> Result<CollapseReport> {
    let (d, n) = x.shape();
    if g_target.shape() != (d, n) {
        return Err(dim_err("simulate_collapse target", format!("{:?}", (d, n)), format!("{:?}", g_target.shape())));
    }
    if f.cols() != n {
        return Err(dim_err("simulate_collapse features", n, f.cols()));
    }
    if w.shape() != (d, f.rows()) {
        return Err(dim_err("simulate_collapse w", format!("{:?}", (d, f.rows())), format!("{:?}", w.shape())));
    }
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate must be positive, got {}", cfg.lr)));
    }
    let guard = 0.1 * w.frobenius_norm();
    let y0 = x.add(&w.matmul(f)?)?;
    let u_y = orthonormal_basis(&y0, RANK_TOL)?;

    let mut dh = DenseMatrix::zeros(d, d);
    let mut dw = DenseMatrix::zeros(d, f.rows());
    let eye = DenseMatrix::identity(d);
    let residual = |dh: &DenseMatrix, dw: &DenseMatrix| -> Result<(DenseMatrix, DenseMatrix)> {
        let y = x.add(&w.add(dw)?.matmul(f)?)?;
        let r = g_target.sub(&eye.add(dh)?.matmul(&y)?)?;
        Ok((r, y))
    };
    let (r0, _) = residual(&dh, &dw)?;
    let initial_loss = 0.5 * r0.frobenius_norm_sq();
    let mut loss = initial_loss;
    let mut max_escape_h: f64 = 0.0;
    let mut max_escape_w: f64 = 0.0;

    for step in 0..cfg.steps {
        let (r, y) = residual(&dh, &dw)?;
        // ∂/∂δh = −R Yᵀ, ∂/∂δW = −(I+δh)ᵀ R Fᵀ
        let gh = r.matmul_t(&y)?;
        let gw = eye.add(&dh)?.t_matmul(&r)?.matmul_t(f)?;
        dh.add_scaled(&gh, cfg.lr)?;
        dw.add_scaled(&gw, cfg.lr)?;
        if cfg.with_orth && cfg.orth_rank > 0 {
            let sw = svd(&dw)?;
            let k = cfg.orth_rank.min(sw.numerical_rank());
            if k > 0 {
                dh = project_out(&dh, &sw.left_vectors(k))?;
            }
        }
        let (r, _) = residual(&dh, &dw)?;
        loss = 0.5 * r.frobenius_norm_sq();
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        if loss > 10.0 * initial_loss && initial_loss > 0.0 {
            return Err(Error::Instability { step, loss, initial: initial_loss });
        }
        let (nh, nw) = (dh.frobenius_norm(), dw.frobenius_norm());
        if nh > guard || nw > guard {
            return Err(Error::Precondition(format!(
                "updates left the early-training regime at step {step}: ‖δh‖ = {nh:e}, ‖δW‖ = {nw:e}, limit {guard:e}"
            )));
        }
        max_escape_h = max_escape_h.max(escape_ratio(&dh, &u_y)?);
        max_escape_w = max_escape_w.max(escape_ratio(&dw, &u_y)?);
    }

    let gram = singular_gram(&dh, &dw, cfg.gram_k)?;
    let (diag_mass, offdiag_mass) = gram_masses(&gram);
    let top_cosine = if gram.rows() > 0 { gram[(0, 0)].abs() } else { 0.0 };
    Ok(CollapseReport {
        gram,
        diag_mass,
        offdiag_mass,
        top_cosine,
        delta_h: dh,
        delta_w: dw,
        initial_loss,
        final_loss: loss,
        max_escape_h,
        max_escape_w,
    })
}

/// A collapse problem whose initial residual has one dominant direction.
#[derive(Clone, Debug)]
pub struct CollapseInstance {
    pub x: DenseMatrix,
    pub f: DenseMatrix,
    pub w: DenseMatrix,
    pub g_target: DenseMatrix,
}

/// `G = X + W F + u₁a₁ᵀ + ratio·u₂a₂ᵀ` with orthonormal `u`, `a` and
/// Gaussian `X`, `F`, `W`. Both `R Yᵀ` and `R Fᵀ` then share `u₁` as their
/// leading left singular direction up to `O(ratio)`.
pub fn shared_direction_instance(d: usize, p: usize, n: usize, ratio: f64, rng: &mut impl Rng) -> Result<CollapseInstance> {
    let x = rng::gaussian_matrix(d, n, 1.0, rng);
    let f = rng::gaussian_matrix(p, n, 1.0, rng);
    let w = rng::gaussian_matrix(d, p, 1.0 / (p as f64).sqrt(), rng);
    let u = rng::orthonormal_matrix(d, 2, rng);
    let a = rng::orthonormal_matrix(n, 2, rng);
    let r0 = DenseMatrix::outer(&u.col(0), &a.col(0)).add(&DenseMatrix::outer(&u.col(1), &a.col(1)).scale(ratio))?;
    let g_target = x.add(&w.matmul(&f)?)?.add(&r0)?;
    Ok(CollapseInstance { x, f, w, g_target })
}

/// Cosine between an adapter's shift and a weight update's shift of the MLP
/// output at the same input.
pub fn shift_cosine(adapter_shift: &[f64], weight_shift: &[f64]) -> Result<f64> {
    if adapter_shift.len() != weight_shift.len() {
        return Err(dim_err("shift_cosine", adapter_shift.len(), weight_shift.len()));
    }
    vecops::cosine(adapter_shift, weight_shift)
        .map(|c| c.clamp(-1.0, 1.0))
        .ok_or_else(|| Error::UndefinedRatio("cosine of a zero shift".into()))
}

/// MLP output with the modified parameters minus the output without.
pub fn weight_shift(base: &GluParams, modified: &GluParams, h: &[f64]) -> Result<DenseVector> {
    Ok(vecops::sub(&nanomodel::glu_forward(modified, h)?, &nanomodel::glu_forward(base, h)?))
}

/// Each of the six block weights moved by a Gaussian direction whose spectral
/// norm is `scale · ‖W‖₂`.
pub fn random_fine_tune(glu: &GluParams, attn: &AttnParams, scale: f64, rng: &mut impl Rng) -> Result<(GluParams, AttnParams)> {
    let mut bump = |m: &DenseMatrix| -> Result<DenseMatrix> {
        let dir = rng::gaussian_matrix(m.rows(), m.cols(), 1.0, rng);
        let dn = spectral_norm(&dir)?;
        let target = scale * spectral_norm(m)?;
        if dn == 0.0 {
            return Ok(m.clone());
        }
        m.add(&dir.scale(target / dn))
    };
    let g = GluParams::new(bump(&glu.w_g)?, bump(&glu.w_u)?, bump(&glu.w_d)?, glu.phi)?;
    let a = AttnParams::new(bump(&attn.w_q)?, bump(&attn.w_k)?, bump(&attn.w_v)?)?;
    Ok((g, a))
}

/// Quality of a linear adapter `h ↦ h + M h` fitted to an oracle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub m: DenseMatrix,
    /// `‖fit − δ‖_F / ‖δ‖_F`.
    pub rel_residual_oracle: f64,
    /// `‖fit − δ‖_F / ‖H_FT‖_F`, relative to the fine-tuned hidden states.
    pub rel_residual_state: f64,
}

/// Minimum-norm `M` with `M·inputs ≈ delta` in the least-squares sense.
pub fn fit_linear(inputs: &[DenseVector], delta: &[DenseVector], ft_states: &[DenseVector]) -> Result<LinearFit> {
    if inputs.is_empty() {
        return Err(Error::Precondition("cannot fit an adapter to an empty sample".into()));
    }
    check_same_shape("fit_linear", inputs, delta)?;
    let x = DenseMatrix::from_columns(inputs)?;
    let t = DenseMatrix::from_columns(delta)?;
    let m = least_squares(&x, &t)?;
    let err = m.matmul(&x)?.sub(&t)?.frobenius_norm();
    let dn = t.frobenius_norm();
    let sn = vecops::seq_norm(ft_states);
    Ok(LinearFit {
        m,
        rel_residual_oracle: if dn > 0.0 { err / dn } else { err },
        rel_residual_state: if sn > 0.0 { err / sn } else { err },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFitReport {
    /// Adapter on the MLP output, judged on the block output.
    pub post_mlp: LinearFit,
    /// Adapter on the block output.
    pub post_block: LinearFit,
    pub oracle_norm: f64,
    pub positions: usize,
}

/// Fits post-MLP and post-block linear adapters to the block-output oracle
/// of a fine-tune, pooling all positions of all sequences.
pub fn oracle_fit(
    base: (&GluParams, &AttnParams),
    ft: (&GluParams, &AttnParams),
    seqs: &[Vec<DenseVector>],
    opts: BlockOptions,
) -> Result<OracleFitReport> {
    let mut mlp_out = Vec::new();
    let mut block_out = Vec::new();
    let mut delta = Vec::new();
    let mut ft_states = Vec::new();
    for hs in seqs {
        let b = nanomodel::block_forward(base.0, base.1, hs, opts)?;
        let f = nanomodel::block_forward(ft.0, ft.1, hs, opts)?;
        let oracle = compute_oracle(&b, &f, TraceSite::PostBlock)?;
        mlp_out.extend(b.post_mlp);
        block_out.extend(b.post_block);
        delta.extend(oracle.delta);
        ft_states.extend(f.post_block);
    }
    Ok(OracleFitReport {
        post_mlp: fit_linear(&mlp_out, &delta, &ft_states)?,
        post_block: fit_linear(&block_out, &delta, &ft_states)?,
        oracle_norm: vecops::seq_norm(&delta),
        positions: delta.len(),
    })
}
