//! A single pre-norm transformer block at toy scale:
//! `LayerNorm → attention → skip → (LayerNorm) → GLU → skip`,
//! with every intermediate hidden state recorded in a [`BlockTrace`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::numkit::{vecops, DenseMatrix, DenseVector};
use crate::rng;

pub const D_MODEL_RANGE: (usize, usize) = (2, 64);
pub const D_MLP_RANGE: (usize, usize) = (2, 256);

/// Standard deviations at or below this make LayerNorm undefined.
pub const LAYERNORM_MIN_STD: f64 = 1e-12;

/// Upper bound on `sup |silu'(x)|` (attained near `x ≈ 2.3994`, value ≈ 1.09984).
pub const SILU_LIPSCHITZ: f64 = 1.0999;

/// Elementwise nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Silu,
    Relu,
    Identity,
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => sigmoid(x),
            Activation::Silu => x * sigmoid(x),
            Activation::Relu => x.max(0.0),
            Activation::Identity => x,
        }
    }

    /// Analytic derivative. ReLU uses 0 at the kink.
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(x);
                s * (1.0 - s)
            }
            Activation::Silu => {
                let s = sigmoid(x);
                s * (1.0 + x * (1.0 - s))
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn apply_vec(self, v: &[f64]) -> DenseVector {
        v.iter().map(|&x| self.apply(x)).collect()
    }

    pub fn derivative_vec(self, v: &[f64]) -> DenseVector {
        v.iter().map(|&x| self.derivative(x)).collect()
    }

    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Sigmoid => 0.25,
            Activation::Silu => SILU_LIPSCHITZ,
            Activation::Relu | Activation::Identity => 1.0,
        }
    }

    /// `sup |φ|`, infinite for unbounded activations.
    pub fn bound(self) -> f64 {
        match self {
            Activation::Sigmoid => 1.0,
            _ => f64::INFINITY,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Silu => "silu",
            Activation::Relu => "relu",
            Activation::Identity => "identity",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Activation::Sigmoid),
            "silu" => Ok(Activation::Silu),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

/// Gated MLP `W_d (φ(W_g h) ⊙ W_u h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GluParams {
    pub w_g: DenseMatrix,
    pub w_u: DenseMatrix,
    pub w_d: DenseMatrix,
    pub phi: Activation,
}

impl GluParams {
    pub fn new(w_g: DenseMatrix, w_u: DenseMatrix, w_d: DenseMatrix, phi: Activation) -> Result<Self> {
        let p = Self { w_g, w_u, w_d, phi };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(d_model: usize, d_mlp: usize, phi: Activation) -> Self {
        Self {
            w_g: DenseMatrix::zeros(d_mlp, d_model),
            w_u: DenseMatrix::zeros(d_mlp, d_model),
            w_d: DenseMatrix::zeros(d_model, d_mlp),
            phi,
        }
    }

    /// Gaussian weights with standard deviation `scale / sqrt(fan_in)`.
    pub fn random(d_model: usize, d_mlp: usize, phi: Activation, scale: f64, rng: &mut impl Rng) -> Self {
        let in_std = scale / (d_model as f64).sqrt();
        let out_std = scale / (d_mlp as f64).sqrt();
        Self {
            w_g: rng::gaussian_matrix(d_mlp, d_model, in_std, rng),
            w_u: rng::gaussian_matrix(d_mlp, d_model, in_std, rng),
            w_d: rng::gaussian_matrix(d_model, d_mlp, out_std, rng),
            phi,
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_g.cols()
    }

    pub fn d_mlp(&self) -> usize {
        self.w_g.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let (dm, d) = self.w_g.shape();
        if self.w_u.shape() != (dm, d) {
            return Err(dim_err("GluParams w_u", format!("{:?}", (dm, d)), format!("{:?}", self.w_u.shape())));
        }
        if self.w_d.shape() != (d, dm) {
            return Err(dim_err("GluParams w_d", format!("{:?}", (d, dm)), format!("{:?}", self.w_d.shape())));
        }
        if !(self.w_g.is_finite() && self.w_u.is_finite() && self.w_d.is_finite()) {
            return Err(Error::NonFinite("GluParams"));
        }
        Ok(())
    }
}

/// Single-head attention projections (no output projection).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttnParams {
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
}

impl AttnParams {
    pub fn new(w_q: DenseMatrix, w_k: DenseMatrix, w_v: DenseMatrix) -> Result<Self> {
        let p = Self { w_q, w_k, w_v };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(d_model: usize) -> Self {
        Self {
            w_q: DenseMatrix::zeros(d_model, d_model),
            w_k: DenseMatrix::zeros(d_model, d_model),
            w_v: DenseMatrix::zeros(d_model, d_model),
        }
    }

    pub fn random(d_model: usize, scale: f64, rng: &mut impl Rng) -> Self {
        let std = scale / (d_model as f64).sqrt();
        Self {
            w_q: rng::gaussian_matrix(d_model, d_model, std, rng),
            w_k: rng::gaussian_matrix(d_model, d_model, std, rng),
            w_v: rng::gaussian_matrix(d_model, d_model, std, rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_q.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.w_q.rows();
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.shape() != (d, d) {
                return Err(dim_err("AttnParams", format!("{name} {d}x{d}"), format!("{:?}", w.shape())));
            }
            if !w.is_finite() {
                return Err(Error::NonFinite("AttnParams"));
            }
        }
        Ok(())
    }
}

/// Forward-pass switches.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockOptions {
    /// Apply LayerNorm to the MLP input. Off by default: the GLU then sees
    /// `h + Attn(h)` directly.
    #[serde(default)]
    pub mlp_layernorm: bool,
    /// Causal attention mask. Off by default (bidirectional).
    #[serde(default)]
    pub causal: bool,
}

/// Hidden states captured at each site of one block, per position.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub h_in: Vec<DenseVector>,
    /// `h + Attn(h)`.
    pub post_attn: Vec<DenseVector>,
    /// GLU output alone (after any post-MLP adapter).
    pub post_mlp: Vec<DenseVector>,
    /// Residual stream leaving the block.
    pub post_block: Vec<DenseVector>,
}

/// Named capture site of a [`BlockTrace`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TraceSite {
    HIn,
    PostAttn,
    PostMlp,
    PostBlock,
}

impl BlockTrace {
    pub fn site(&self, site: TraceSite) -> &[DenseVector] {
        match site {
            TraceSite::HIn => &self.h_in,
            TraceSite::PostAttn => &self.post_attn,
            TraceSite::PostMlp => &self.post_mlp,
            TraceSite::PostBlock => &self.post_block,
        }
    }

    pub fn positions(&self) -> usize {
        self.h_in.len()
    }

    /// Max-abs violation of `post_block = post_attn + post_mlp`.
    pub fn residual_identity_defect(&self) -> f64 {
        self.post_block
            .iter()
            .zip(&self.post_attn)
            .zip(&self.post_mlp)
            .flat_map(|((b, a), m)| b.iter().zip(a).zip(m).map(|((b, a), m)| (b - (a + m)).abs()))
            .fold(0.0, f64::max)
    }
}

/// On-disk model record: `{"d_model", "d_mlp", "phi", "w_g", …}` with
/// row-major nested arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub d_model: usize,
    pub d_mlp: usize,
    pub phi: Activation,
    pub w_g: DenseMatrix,
    pub w_u: DenseMatrix,
    pub w_d: DenseMatrix,
    pub w_q: DenseMatrix,
    pub w_k: DenseMatrix,
    pub w_v: DenseMatrix,
    #[serde(default)]
    pub options: BlockOptions,
}

impl ModelParams {
    pub fn from_parts(glu: &GluParams, attn: &AttnParams, options: BlockOptions) -> Result<Self> {
        let m = Self {
            d_model: glu.d_model(),
            d_mlp: glu.d_mlp(),
            phi: glu.phi,
            w_g: glu.w_g.clone(),
            w_u: glu.w_u.clone(),
            w_d: glu.w_d.clone(),
            w_q: attn.w_q.clone(),
            w_k: attn.w_k.clone(),
            w_v: attn.w_v.clone(),
            options,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_dims(self.d_model, self.d_mlp)?;
        let (glu, attn) = self.split_unchecked();
        glu.validate()?;
        attn.validate()?;
        if glu.d_model() != self.d_model || glu.d_mlp() != self.d_mlp || attn.d_model() != self.d_model {
            return Err(dim_err(
                "ModelParams",
                format!("d_model={}, d_mlp={}", self.d_model, self.d_mlp),
                format!("weights for d_model={}, d_mlp={}", glu.d_model(), glu.d_mlp()),
            ));
        }
        Ok(())
    }

    fn split_unchecked(&self) -> (GluParams, AttnParams) {
        (
            GluParams {
                w_g: self.w_g.clone(),
                w_u: self.w_u.clone(),
                w_d: self.w_d.clone(),
                phi: self.phi,
            },
            AttnParams {
                w_q: self.w_q.clone(),
                w_k: self.w_k.clone(),
                w_v: self.w_v.clone(),
            },
        )
    }

    pub fn split(&self) -> Result<(GluParams, AttnParams)> {
        self.validate()?;
        Ok(self.split_unchecked())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Rejects model sizes outside the supported desk-scale range.
pub fn check_dims(d_model: usize, d_mlp: usize) -> Result<()> {
    if d_model < D_MODEL_RANGE.0 || d_model > D_MODEL_RANGE.1 {
        return Err(Error::Config(format!(
            "d_model = {d_model} outside supported range [{}, {}]",
            D_MODEL_RANGE.0, D_MODEL_RANGE.1
        )));
    }
    if d_mlp < D_MLP_RANGE.0 || d_mlp > D_MLP_RANGE.1 {
        return Err(Error::Config(format!(
            "d_mlp = {d_mlp} outside supported range [{}, {}]",
            D_MLP_RANGE.0, D_MLP_RANGE.1
        )));
    }
    Ok(())
}

/// Intermediate activations of one GLU evaluation.
#[derive(Clone, Debug)]
pub struct GluActivations {
    pub a_g: DenseVector,
    pub a_u: DenseVector,
    /// `φ(a_g)`
    pub gate: DenseVector,
    /// `φ(a_g) ⊙ a_u`
    pub m: DenseVector,
    pub out: DenseVector,
}

pub fn glu_activations(p: &GluParams, h: &[f64]) -> Result<GluActivations> {
    vecops::check_len("glu_forward", h, p.d_model())?;
    let a_g = p.w_g.matvec(h)?;
    let a_u = p.w_u.matvec(h)?;
    let gate = p.phi.apply_vec(&a_g);
    let m = vecops::hadamard(&gate, &a_u);
    let out = p.w_d.matvec(&m)?;
    Ok(GluActivations { a_g, a_u, gate, m, out })
}

/// `W_d (φ(W_g h) ⊙ W_u h)`.
pub fn glu_forward(p: &GluParams, h: &[f64]) -> Result<DenseVector> {
    Ok(glu_activations(p, h)?.out)
}

/// Unscaled LayerNorm `√n · Ph / ‖Ph‖` with `P = I − 𝟙𝟙ᵀ/n`.
pub fn layernorm(h: &[f64]) -> Result<DenseVector> {
    let n = h.len();
    if n < 2 {
        return Err(Error::DegenerateInput(format!("layernorm needs at least 2 entries, got {n}")));
    }
    let mu = vecops::mean(h);
    let centered: DenseVector = h.iter().map(|x| x - mu).collect();
    let c_norm = vecops::norm(&centered);
    let std = c_norm / (n as f64).sqrt();
    if !(std > LAYERNORM_MIN_STD) {
        return Err(Error::DegenerateInput(format!("layernorm input is constant (std = {std:e})")));
    }
    Ok(vecops::scale(&centered, (n as f64).sqrt() / c_norm))
}

/// Intermediate attention quantities for a sequence.
#[derive(Clone, Debug)]
pub struct AttnActivations {
    pub normed: Vec<DenseVector>,
    pub values: Vec<DenseVector>,
    /// `weights[w][i]`: weight query position `w` puts on key position `i`.
    pub weights: Vec<DenseVector>,
    /// `h + Σ_i a_i W_v LN(h_i)` per position.
    pub out: Vec<DenseVector>,
}

pub fn attn_activations(p: &AttnParams, hs: &[DenseVector], causal: bool) -> Result<AttnActivations> {
    if hs.is_empty() {
        return Err(Error::Precondition("attention needs at least one position".into()));
    }
    let d = p.d_model();
    for h in hs {
        vecops::check_len("attn_forward", h, d)?;
    }
    let normed = hs.iter().map(|h| layernorm(h)).collect::<Result<Vec<_>>>()?;
    let q = normed.iter().map(|h| p.w_q.matvec(h)).collect::<Result<Vec<_>>>()?;
    let k = normed.iter().map(|h| p.w_k.matvec(h)).collect::<Result<Vec<_>>>()?;
    let values = normed.iter().map(|h| p.w_v.matvec(h)).collect::<Result<Vec<_>>>()?;
    let scale = 1.0 / (d as f64).sqrt();

    let mut weights = Vec::with_capacity(hs.len());
    let mut out = Vec::with_capacity(hs.len());
    for (w, qw) in q.iter().enumerate() {
        let visible = if causal { w + 1 } else { hs.len() };
        let scores: Vec<f64> = k[..visible].iter().map(|ki| scale * vecops::dot(qw, ki)).collect();
        let mut a = softmax(&scores);
        a.resize(hs.len(), 0.0);
        let mut o = hs[w].clone();
        for (ai, vi) in a.iter().zip(&values) {
            vecops::axpy(&mut o, *ai, vi);
        }
        weights.push(a);
        out.push(o);
    }
    Ok(AttnActivations {
        normed,
        values,
        weights,
        out,
    })
}

pub fn softmax(scores: &[f64]) -> DenseVector {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Single-head softmax attention over layer-normed inputs, with the skip:
/// `y_w = h_w + Σ_i softmax_i(q_w·k_i / √n) · W_v LN(h_i)`.
pub fn attn_forward(p: &AttnParams, hs: &[DenseVector], causal: bool) -> Result<Vec<DenseVector>> {
    Ok(attn_activations(p, hs, causal)?.out)
}

/// MLP input for a given post-attention state.
pub(crate) fn mlp_input(post_attn: &[f64], opts: BlockOptions) -> Result<DenseVector> {
    if opts.mlp_layernorm {
        layernorm(post_attn)
    } else {
        Ok(post_attn.to_vec())
    }
}

pub fn block_forward(
    glu: &GluParams,
    attn: &AttnParams,
    hs: &[DenseVector],
    opts: BlockOptions,
) -> Result<BlockTrace> {
    if glu.d_model() != attn.d_model() {
        return Err(dim_err("block_forward", attn.d_model(), glu.d_model()));
    }
    let post_attn = attn_forward(attn, hs, opts.causal)?;
    let post_mlp = post_attn
        .iter()
        .map(|y| glu_forward(glu, &mlp_input(y, opts)?))
        .collect::<Result<Vec<_>>>()?;
    let post_block = post_attn.iter().zip(&post_mlp).map(|(a, m)| vecops::add(a, m)).collect();
    Ok(BlockTrace {
        h_in: hs.to_vec(),
        post_attn,
        post_mlp,
        post_block,
    })
}

/// `‖post_mlp‖ / ‖post_block‖` per position.
pub fn mlp_block_ratio(trace: &BlockTrace) -> Result<Vec<f64>> {
    trace
        .post_mlp
        .iter()
        .zip(&trace.post_block)
        .enumerate()
        .map(|(i, (m, b))| {
            let nb = vecops::norm(b);
            if nb == 0.0 {
                return Err(Error::UndefinedRatio(format!("post_block is zero at position {i}")));
            }
            Ok(vecops::norm(m) / nb)
        })
        .collect()
}
