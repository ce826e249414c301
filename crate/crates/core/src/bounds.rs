//! Error-propagation bounds for LayerNorm, linear maps, the layernormed GLU
//! with skip, and attention, plus random scans that compare each bound with
//! the actual output distance.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nanomodel::{self, Activation, AttnParams, GluParams};
use crate::numkit::{spectral_norm, vecops, DenseMatrix, DenseVector};
use crate::rng;

/// Relative slack allowed before an instance counts as a violation.
pub const VIOLATION_SLACK: f64 = 1e-9;

/// Tolerance on the bound hypotheses (`‖h − h'‖ ≤ ε`, `‖W − W'‖₂ ≤ δ`, …).
const HYPOTHESIS_SLACK: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Lemma {
    Layernorm,
    Linear,
    GluGeneral,
    GluSigmoid,
    Attention,
}

impl Lemma {
    pub const ALL: [Lemma; 5] = [
        Lemma::Layernorm,
        Lemma::Linear,
        Lemma::GluGeneral,
        Lemma::GluSigmoid,
        Lemma::Attention,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Lemma::Layernorm => "layernorm",
            Lemma::Linear => "linear",
            Lemma::GluGeneral => "glu_general",
            Lemma::GluSigmoid => "glu_sigmoid",
            Lemma::Attention => "attention",
        }
    }
}

impl fmt::Display for Lemma {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Lemma {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Lemma::ALL
            .into_iter()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown lemma `{s}`")))
    }
}

/// One evaluated bound.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundEval {
    pub lhs: f64,
    pub rhs: f64,
}

impl BoundEval {
    /// `lhs / rhs`, with `0/0` read as 0.
    pub fn ratio(&self) -> f64 {
        if self.lhs == 0.0 {
            0.0
        } else {
            self.lhs / self.rhs
        }
    }

    pub fn violated(&self) -> bool {
        self.lhs > self.rhs * (1.0 + VIOLATION_SLACK)
    }
}

/// Attention bound with the intermediate softmax sub-bound exposed.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionEval {
    pub lhs: f64,
    /// Larger of `rhs_proof` and `rhs_statement`.
    pub rhs: f64,
    /// Composite expression from the end of the proof.
    pub rhs_proof: f64,
    /// Lemma statement with `‖a − a'‖₁ ≤ √m · (softmax sub-bound)`.
    pub rhs_statement: f64,
    /// Actual `‖a − a'‖₂` at the final position.
    pub attn_weight_gap: f64,
    /// The softmax sub-bound on `‖a − a'‖₂`.
    pub attn_weight_bound: f64,
}

impl AttentionEval {
    pub fn eval(&self) -> BoundEval {
        BoundEval {
            lhs: self.lhs,
            rhs: self.rhs,
        }
    }
}

fn check_within(what: &str, actual: f64, limit: f64) -> Result<()> {
    if !(limit >= 0.0) || actual > limit * (1.0 + HYPOTHESIS_SLACK) + f64::MIN_POSITIVE {
        return Err(Error::Precondition(format!("{what} = {actual:e} exceeds {limit:e}")));
    }
    Ok(())
}

fn spectral_gap(a: &DenseMatrix, b: &DenseMatrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(dim_err("spectral_gap", format!("{:?}", a.shape()), format!("{:?}", b.shape())));
    }
    spectral_norm(&a.sub(b)?)
}

/// `min(x, y)` where an infinite `x` is the no-bound sentinel.
fn min_b(b: f64, x: f64) -> f64 {
    if b.is_infinite() {
        x
    } else {
        b.min(x)
    }
}

fn std_of(h: &[f64]) -> f64 {
    vecops::std_dev(h)
}

/// `‖LN(h) − LN(h')‖ ≤ ε / min(std(h), std(h'))`.
pub fn layernorm_bound(h: &[f64], h_prime: &[f64], eps: f64) -> Result<BoundEval> {
    vecops::check_len("layernorm_bound", h_prime, h.len())?;
    check_within("‖h − h'‖", vecops::distance(h, h_prime), eps)?;
    let a = nanomodel::layernorm(h)?;
    let b = nanomodel::layernorm(h_prime)?;
    let s = std_of(h).min(std_of(h_prime));
    Ok(BoundEval {
        lhs: vecops::distance(&a, &b),
        rhs: eps / s,
    })
}

/// `‖Wh − W'h'‖ ≤ ‖W‖₂ ε + √n δ` for `‖h‖ = ‖h'‖ = √n`.
pub fn linear_bound(
    w: &DenseMatrix,
    w_prime: &DenseMatrix,
    h: &[f64],
    h_prime: &[f64],
    eps: f64,
    delta: f64,
) -> Result<BoundEval> {
    let n = h.len();
    vecops::check_len("linear_bound", h_prime, n)?;
    let root_n = (n as f64).sqrt();
    for (name, v) in [("‖h‖", h), ("‖h'‖", h_prime)] {
        let nv = vecops::norm(v);
        if (nv - root_n).abs() > 1e-9 * root_n {
            return Err(Error::Precondition(format!("{name} = {nv} but the bound assumes √n = {root_n}")));
        }
    }
    check_within("‖h − h'‖", vecops::distance(h, h_prime), eps)?;
    check_within("‖W − W'‖₂", spectral_gap(w, w_prime)?, delta)?;
    let lhs = vecops::distance(&w.matvec(h)?, &w_prime.matvec(h_prime)?);
    Ok(BoundEval {
        lhs,
        rhs: spectral_norm(w)? * eps + root_n * delta,
    })
}

/// `h + GLU(LN(h))`, the layernormed GLU with skip.
pub fn glu_ln_skip(p: &GluParams, h: &[f64]) -> Result<DenseVector> {
    Ok(vecops::add(h, &nanomodel::glu_forward(p, &nanomodel::layernorm(h)?)?))
}

/// Which form of the GLU bound to evaluate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum GluBoundMode {
    /// General lemma with Lipschitz constant `L` and bound `B` (`∞` allowed).
    General { lipschitz: f64, bound: f64 },
    /// Simplified sigmoid form.
    Sigmoid,
}

struct GluNorms {
    wg: f64,
    wu: f64,
    wd: f64,
    wu_prime: f64,
}

/// Output distance of the layernormed, skip-connected GLU and its bound.
pub fn glu_bound(
    p: &GluParams,
    p_prime: &GluParams,
    h: &[f64],
    h_prime: &[f64],
    eps: f64,
    delta: f64,
    mode: GluBoundMode,
) -> Result<BoundEval> {
    let n = p.d_model();
    vecops::check_len("glu_bound h", h, n)?;
    vecops::check_len("glu_bound h'", h_prime, n)?;
    if p_prime.d_model() != n || p_prime.d_mlp() != p.d_mlp() {
        return Err(dim_err("glu_bound params", format!("{:?}", (n, p.d_mlp())), format!("{:?}", (p_prime.d_model(), p_prime.d_mlp()))));
    }
    check_within("‖h − h'‖", vecops::distance(h, h_prime), eps)?;
    check_within("‖W_g − W_g'‖₂", spectral_gap(&p.w_g, &p_prime.w_g)?, delta)?;
    check_within("‖W_u − W_u'‖₂", spectral_gap(&p.w_u, &p_prime.w_u)?, delta)?;
    check_within("‖W_d − W_d'‖₂", spectral_gap(&p.w_d, &p_prime.w_d)?, delta)?;
    if matches!(mode, GluBoundMode::Sigmoid) && (p.phi != Activation::Sigmoid || p_prime.phi != Activation::Sigmoid) {
        return Err(Error::Precondition("sigmoid form of the GLU bound needs φ = sigmoid".into()));
    }

    let lhs = vecops::distance(&glu_ln_skip(p, h)?, &glu_ln_skip(p_prime, h_prime)?);
    let s = std_of(h).min(std_of(h_prime));
    let norms = GluNorms {
        wg: spectral_norm(&p.w_g)?,
        wu: spectral_norm(&p.w_u)?,
        wd: spectral_norm(&p.w_d)?,
        wu_prime: spectral_norm(&p_prime.w_u)?,
    };
    let root_n = (n as f64).sqrt();
    let rhs = match mode {
        GluBoundMode::General { lipschitz, bound } => {
            let gate_prime = p_prime.phi.apply_vec(&p_prime.w_g.matvec(&nanomodel::layernorm(h_prime)?)?);
            let gate_norm = min_b(bound, vecops::norm(&gate_prime));
            let gate_term = min_b(2.0 * bound, lipschitz * (norms.wg * eps / s + root_n * delta));
            eps + root_n * norms.wd * norms.wu * gate_term
                + norms.wd * (norms.wu * eps / s + root_n * delta) * gate_norm
                + root_n * norms.wu_prime * delta * gate_norm
        }
        GluBoundMode::Sigmoid => {
            eps + norms.wd * norms.wu * eps / s * (root_n / 4.0 * norms.wg + 1.0)
                + root_n * delta * (root_n / 4.0 * norms.wd * norms.wu + norms.wd + root_n * norms.wu_prime)
        }
    };
    Ok(BoundEval { lhs, rhs })
}

/// Attention bound at the final position of the sequence.
///
/// `s` is the smallest standard deviation over every position of both
/// sequences: the proof bounds `‖LN(H_i) − LN(H'_i)‖ ≤ ε/s` at all `i`.
pub fn attention_bound(
    p: &AttnParams,
    p_prime: &AttnParams,
    hs: &[DenseVector],
    hs_prime: &[DenseVector],
    eps: f64,
    delta: f64,
) -> Result<AttentionEval> {
    let m = hs.len();
    if m == 0 || hs_prime.len() != m {
        return Err(dim_err("attention_bound", m, hs_prime.len()));
    }
    let n = p.d_model();
    if p_prime.d_model() != n {
        return Err(dim_err("attention_bound params", n, p_prime.d_model()));
    }
    for (h, hp) in hs.iter().zip(hs_prime) {
        vecops::check_len("attention_bound", h, n)?;
        vecops::check_len("attention_bound", hp, n)?;
        check_within("‖H_i − H'_i‖", vecops::distance(h, hp), eps)?;
    }
    check_within("‖W_q − W_q'‖₂", spectral_gap(&p.w_q, &p_prime.w_q)?, delta)?;
    check_within("‖W_k − W_k'‖₂", spectral_gap(&p.w_k, &p_prime.w_k)?, delta)?;
    check_within("‖W_v − W_v'‖₂", spectral_gap(&p.w_v, &p_prime.w_v)?, delta)?;

    let a = nanomodel::attn_activations(p, hs, false)?;
    let b = nanomodel::attn_activations(p_prime, hs_prime, false)?;
    let w = m - 1;
    let lhs = vecops::distance(&a.out[w], &b.out[w]);
    let attn_weight_gap = vecops::distance(&a.weights[w], &b.weights[w]);

    let s = hs.iter().chain(hs_prime).map(|h| std_of(h)).fold(f64::INFINITY, f64::min);
    let wq = spectral_norm(&p.w_q)?;
    let wk = spectral_norm(&p.w_k)?;
    let wv = spectral_norm(&p.w_v)?;
    let wq_prime = spectral_norm(&p_prime.w_q)?;
    let (mf, nf) = (m as f64, n as f64);

    let attn_weight_bound =
        (mf * nf).sqrt() * eps / (2.0 * s) * (wq + wq_prime) * wk + mf.sqrt() * nf * delta * (wk + wq_prime);
    let rhs_proof = eps
        + wv * (mf * nf * eps / (2.0 * s)) * (wq + wq_prime) * wk
        + mf * nf.powf(1.5) * wv * delta * (wk + wq_prime)
        + wv * mf.sqrt() * eps / s
        + delta * (mf * nf).sqrt();
    let rhs_statement = eps + wv * nf.sqrt() * mf.sqrt() * attn_weight_bound + wv * eps / s + delta * nf.sqrt();
    Ok(AttentionEval {
        lhs,
        rhs: rhs_proof.max(rhs_statement),
        rhs_proof,
        rhs_statement,
        attn_weight_gap,
        attn_weight_bound,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheckReport {
    pub lemma: Lemma,
    pub trials: usize,
    pub max_lhs_over_rhs: f64,
    pub max_lhs: f64,
    pub violations: usize,
    /// Attention only: instances where the softmax sub-bound on `‖a − a'‖₂`
    /// failed even if the composite held.
    pub sub_bound_violations: usize,
    /// Attention only: largest `rhs_statement / rhs_proof` observed.
    pub max_statement_over_proof: f64,
}

/// Parameters of a random bound scan.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanConfig {
    pub trials: usize,
    pub seed: u64,
    pub eps_grid: Vec<f64>,
    pub delta_grid: Vec<f64>,
    /// Largest model width drawn.
    pub max_dim: usize,
}

impl Default for ScanConfig {
    fn default() -> Self {
        Self {
            trials: 1000,
            seed: 0,
            eps_grid: vec![1e-3, 1e-2],
            delta_grid: vec![1e-3, 1e-2],
            max_dim: 16,
        }
    }
}

fn pick<R: Rng>(grid: &[f64], rng: &mut R) -> f64 {
    grid[rng.random_range(0..grid.len())]
}

/// A vector at distance `≤ eps` from `h` (uniform radius, random direction).
fn nearby(h: &[f64], eps: f64, rng: &mut impl Rng) -> DenseVector {
    let dir = rng::unit_vector(h.len(), rng);
    vecops::add(h, &vecops::scale(&dir, eps * rng.random::<f64>()))
}

/// `m` moved by a Gaussian direction of spectral norm `≤ delta`.
fn nearby_matrix(m: &DenseMatrix, delta: f64, rng: &mut impl Rng) -> Result<DenseMatrix> {
    let dir = rng::gaussian_matrix(m.rows(), m.cols(), 1.0, rng);
    let dn = spectral_norm(&dir)?;
    m.add(&dir.scale(delta * rng.random::<f64>() / dn))
}

fn random_glu(n: usize, k: usize, phi: Activation, rng: &mut impl Rng) -> GluParams {
    let scale = rng::uniform(0.5, 2.0, rng);
    GluParams::random(n, k, phi, scale, rng)
}

fn scan_trial(lemma: Lemma, cfg: &ScanConfig, rng: &mut impl Rng) -> Result<(BoundEval, Option<AttentionEval>)> {
    let eps = pick(&cfg.eps_grid, rng);
    let delta = pick(&cfg.delta_grid, rng);
    let max_dim = cfg.max_dim.max(2);
    let n = rng.random_range(2..=max_dim);
    let spread = rng::uniform(0.2, 3.0, rng);
    let h = rng::gaussian_vector(n, spread, rng);
    match lemma {
        Lemma::Layernorm => {
            let hp = nearby(&h, eps, rng);
            Ok((layernorm_bound(&h, &hp, eps)?, None))
        }
        Lemma::Linear => {
            let root_n = (n as f64).sqrt();
            let h = vecops::scale(&h, root_n / vecops::norm(&h));
            // Rescaling back onto the sphere at most doubles the distance.
            let hp = if eps == 0.0 {
                h.clone()
            } else {
                let near = nearby(&h, eps / 2.0, rng);
                vecops::scale(&near, root_n / vecops::norm(&near))
            };
            let rows = rng.random_range(1..=max_dim);
            let w = rng::gaussian_matrix(rows, n, 1.0 / root_n, rng);
            let wp = nearby_matrix(&w, delta, rng)?;
            Ok((linear_bound(&w, &wp, &h, &hp, eps, delta)?, None))
        }
        Lemma::GluGeneral | Lemma::GluSigmoid => {
            let k = rng.random_range(2..=2 * max_dim);
            let (phi, mode) = if lemma == Lemma::GluSigmoid {
                (Activation::Sigmoid, GluBoundMode::Sigmoid)
            } else {
                let phi = [Activation::Silu, Activation::Sigmoid, Activation::Relu][rng.random_range(0..3)];
                (
                    phi,
                    GluBoundMode::General {
                        lipschitz: phi.lipschitz(),
                        bound: phi.bound(),
                    },
                )
            };
            let p = random_glu(n, k, phi, rng);
            let pp = GluParams::new(
                nearby_matrix(&p.w_g, delta, rng)?,
                nearby_matrix(&p.w_u, delta, rng)?,
                nearby_matrix(&p.w_d, delta, rng)?,
                phi,
            )?;
            let hp = nearby(&h, eps, rng);
            Ok((glu_bound(&p, &pp, &h, &hp, eps, delta, mode)?, None))
        }
        Lemma::Attention => {
            let m = rng.random_range(2..=8);
            let mut hs = vec![h];
            for _ in 1..m {
                hs.push(rng::gaussian_vector(n, spread, rng));
            }
            let hps: Vec<DenseVector> = hs.iter().map(|h| nearby(h, eps, rng)).collect();
            let p = AttnParams::random(n, rng::uniform(0.5, 2.0, rng), rng);
            let pp = AttnParams::new(
                nearby_matrix(&p.w_q, delta, rng)?,
                nearby_matrix(&p.w_k, delta, rng)?,
                nearby_matrix(&p.w_v, delta, rng)?,
            )?;
            let a = attention_bound(&p, &pp, &hs, &hps, eps, delta)?;
            Ok((a.eval(), Some(a)))
        }
    }
}

/// Evaluates `lemma` on `cfg.trials` random valid instances; trial `i` draws
/// from its own stream so results do not depend on the trial count.
pub fn scan(lemma: Lemma, cfg: &ScanConfig) -> Result<BoundCheckReport> {
    if cfg.eps_grid.is_empty() || cfg.delta_grid.is_empty() {
        return Err(Error::Config("bound scan needs non-empty eps and delta grids".into()));
    }
    let lemma_index = Lemma::ALL.iter().position(|&l| l == lemma).unwrap_or(0) as u64;
    let mut report = BoundCheckReport {
        lemma,
        trials: cfg.trials,
        max_lhs_over_rhs: 0.0,
        max_lhs: 0.0,
        violations: 0,
        sub_bound_violations: 0,
        max_statement_over_proof: 0.0,
    };
    for t in 0..cfg.trials {
        let mut rng = rng::stream(cfg.seed, (lemma_index << 32) | t as u64);
        let (eval, attn) = scan_trial(lemma, cfg, &mut rng)?;
        report.max_lhs_over_rhs = report.max_lhs_over_rhs.max(eval.ratio());
        report.max_lhs = report.max_lhs.max(eval.lhs);
        if eval.violated() {
            report.violations += 1;
        }
        if let Some(a) = attn {
            if a.attn_weight_gap > a.attn_weight_bound * (1.0 + VIOLATION_SLACK) {
                report.sub_bound_violations += 1;
            }
            report.max_statement_over_proof = report.max_statement_over_proof.max(a.rhs_statement / a.rhs_proof);
        }
    }
    Ok(report)
}
