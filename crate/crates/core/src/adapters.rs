//! Steering adapters, low-rank weight updates and the orthogonality-constrained
//! joint adapter.
//!
//! A steering adapter rewrites a hidden state `h ↦ h + δh(h)` at one of three
//! loci in the block. A weight update adds `scale · B·A` to one GLU matrix.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{dim_err, Error, Result};
use crate::nanomodel::{self, Activation, AttnParams, BlockOptions, BlockTrace, GluParams};
use crate::numkit::{orthonormal_basis, vecops, DenseMatrix, DenseVector, RANK_TOL};
use crate::rng;

/// Where a steering adapter acts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Locus {
    /// MLP input; the skip path still carries the unmodified state.
    PreMlp,
    /// MLP output, before the skip-add.
    PostMlp,
    /// Residual stream after the skip-add.
    PostBlock,
}

impl Locus {
    pub fn as_str(self) -> &'static str {
        match self {
            Locus::PreMlp => "pre_mlp",
            Locus::PostMlp => "post_mlp",
            Locus::PostBlock => "post_block",
        }
    }
}

impl fmt::Display for Locus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Locus {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pre_mlp" => Ok(Locus::PreMlp),
            "post_mlp" => Ok(Locus::PostMlp),
            "post_block" => Ok(Locus::PostBlock),
            other => Err(Error::Config(format!("unknown locus `{other}`"))),
        }
    }
}

/// Parameterization of the shift `δh(h)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterParam {
    /// `δh = M h`
    Full { m: DenseMatrix },
    /// `δh = W₂ φ(W₁ h)`, `W₁: r×d`, `W₂: d×r`
    Bottleneck {
        w1: DenseMatrix,
        w2: DenseMatrix,
        phi: Activation,
    },
    /// `δh = u (vᵀh)`
    Rank1 { u: DenseVector, v: DenseVector },
    /// `δh = v`, independent of the input.
    Vector { v: DenseVector },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringAdapter {
    pub locus: Locus,
    pub param: AdapterParam,
}

impl SteeringAdapter {
    pub fn new(locus: Locus, param: AdapterParam) -> Result<Self> {
        let a = Self { locus, param };
        a.validate()?;
        Ok(a)
    }

    pub fn full(locus: Locus, m: DenseMatrix) -> Result<Self> {
        Self::new(locus, AdapterParam::Full { m })
    }

    pub fn bottleneck(locus: Locus, w1: DenseMatrix, w2: DenseMatrix, phi: Activation) -> Result<Self> {
        Self::new(locus, AdapterParam::Bottleneck { w1, w2, phi })
    }

    pub fn rank1(locus: Locus, u: DenseVector, v: DenseVector) -> Result<Self> {
        Self::new(locus, AdapterParam::Rank1 { u, v })
    }

    pub fn vector(locus: Locus, v: DenseVector) -> Result<Self> {
        Self::new(locus, AdapterParam::Vector { v })
    }

    /// Bottleneck starting as the identity map: `W₂ = 0`, `W₁ ~ U(±1/√d)`.
    pub fn bottleneck_init(locus: Locus, d: usize, r: usize, phi: Activation, rng: &mut impl Rng) -> Result<Self> {
        let w1 = rng::uniform_matrix(r, d, 1.0 / (d as f64).sqrt(), rng);
        Self::bottleneck(locus, w1, DenseMatrix::zeros(d, r), phi)
    }

    /// All-zero parameters of the given kind (identity map).
    pub fn zeros(locus: Locus, kind: &str, d: usize, r: usize) -> Result<Self> {
        let param = match kind {
            "full" => AdapterParam::Full {
                m: DenseMatrix::zeros(d, d),
            },
            "bottleneck" => AdapterParam::Bottleneck {
                w1: DenseMatrix::zeros(r, d),
                w2: DenseMatrix::zeros(d, r),
                phi: Activation::Identity,
            },
            "rank1" => AdapterParam::Rank1 {
                u: vec![0.0; d],
                v: vec![0.0; d],
            },
            "vector" => AdapterParam::Vector { v: vec![0.0; d] },
            other => return Err(Error::Config(format!("unknown adapter kind `{other}`"))),
        };
        Self::new(locus, param)
    }

    pub fn kind(&self) -> &'static str {
        match self.param {
            AdapterParam::Full { .. } => "full",
            AdapterParam::Bottleneck { .. } => "bottleneck",
            AdapterParam::Rank1 { .. } => "rank1",
            AdapterParam::Vector { .. } => "vector",
        }
    }

    pub fn dim(&self) -> usize {
        match &self.param {
            AdapterParam::Full { m } => m.rows(),
            AdapterParam::Bottleneck { w2, .. } => w2.rows(),
            AdapterParam::Rank1 { u, .. } => u.len(),
            AdapterParam::Vector { v } => v.len(),
        }
    }

    /// A constant vector before the MLP is allowed but not a studied configuration.
    pub fn is_canonical(&self) -> bool {
        !(self.locus == Locus::PreMlp && matches!(self.param, AdapterParam::Vector { .. }))
    }

    pub fn validate(&self) -> Result<()> {
        match &self.param {
            AdapterParam::Full { m } => {
                if !m.is_square() {
                    return Err(dim_err("full adapter", "square matrix", format!("{:?}", m.shape())));
                }
            }
            AdapterParam::Bottleneck { w1, w2, .. } => {
                let (r, d) = w1.shape();
                if r == 0 {
                    return Err(Error::Config("bottleneck rank must be at least 1".into()));
                }
                if w2.shape() != (d, r) {
                    return Err(dim_err("bottleneck w2", format!("{:?}", (d, r)), format!("{:?}", w2.shape())));
                }
            }
            AdapterParam::Rank1 { u, v } => {
                if u.len() != v.len() {
                    return Err(dim_err("rank1 adapter", u.len(), v.len()));
                }
            }
            AdapterParam::Vector { .. } => {}
        }
        if !self.params_flat().iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("SteeringAdapter"));
        }
        Ok(())
    }

    /// The additive shift `δh(h)`.
    pub fn shift(&self, h: &[f64]) -> Result<DenseVector> {
        vecops::check_len("apply_steering", h, self.dim())?;
        Ok(match &self.param {
            AdapterParam::Full { m } => m.matvec(h)?,
            AdapterParam::Bottleneck { w1, w2, phi } => w2.matvec(&phi.apply_vec(&w1.matvec(h)?))?,
            AdapterParam::Rank1 { u, v } => vecops::scale(u, vecops::dot(v, h)),
            AdapterParam::Vector { v } => v.clone(),
        })
    }

    /// `h + δh(h)`.
    pub fn apply(&self, h: &[f64]) -> Result<DenseVector> {
        Ok(vecops::add(h, &self.shift(h)?))
    }

    /// Given `g = ∂L/∂(output)` at input `h`, returns `(∂L/∂params, ∂L/∂h)`,
    /// with parameter gradients in [`Self::params_flat`] order.
    pub fn backward(&self, h: &[f64], g: &[f64]) -> Result<(DenseVector, DenseVector)> {
        vecops::check_len("adapter backward", h, self.dim())?;
        vecops::check_len("adapter backward", g, self.dim())?;
        let mut dh = g.to_vec();
        let grads = match &self.param {
            AdapterParam::Full { m } => {
                vecops::axpy(&mut dh, 1.0, &m.t_matvec(g)?);
                DenseMatrix::outer(g, h).into_data()
            }
            AdapterParam::Bottleneck { w1, w2, phi } => {
                let z = w1.matvec(h)?;
                let p = phi.apply_vec(&z);
                let gp = w2.t_matvec(g)?;
                let gz = vecops::hadamard(&gp, &phi.derivative_vec(&z));
                vecops::axpy(&mut dh, 1.0, &w1.t_matvec(&gz)?);
                let mut out = DenseMatrix::outer(&gz, h).into_data();
                out.extend(DenseMatrix::outer(g, &p).into_data());
                out
            }
            AdapterParam::Rank1 { u, v } => {
                let ug = vecops::dot(u, g);
                vecops::axpy(&mut dh, ug, v);
                let mut out = vecops::scale(g, vecops::dot(v, h));
                out.extend(vecops::scale(h, ug));
                out
            }
            AdapterParam::Vector { .. } => g.to_vec(),
        };
        Ok((grads, dh))
    }

    pub fn num_params(&self) -> usize {
        match &self.param {
            AdapterParam::Full { m } => m.data().len(),
            AdapterParam::Bottleneck { w1, w2, .. } => w1.data().len() + w2.data().len(),
            AdapterParam::Rank1 { u, v } => u.len() + v.len(),
            AdapterParam::Vector { v } => v.len(),
        }
    }

    pub fn params_flat(&self) -> DenseVector {
        match &self.param {
            AdapterParam::Full { m } => m.data().to_vec(),
            AdapterParam::Bottleneck { w1, w2, .. } => [w1.data(), w2.data()].concat(),
            AdapterParam::Rank1 { u, v } => [u.as_slice(), v.as_slice()].concat(),
            AdapterParam::Vector { v } => v.clone(),
        }
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        vecops::check_len("set_params_flat", p, self.num_params())?;
        match &mut self.param {
            AdapterParam::Full { m } => m.data_mut().copy_from_slice(p),
            AdapterParam::Bottleneck { w1, w2, .. } => {
                let n1 = w1.data().len();
                w1.data_mut().copy_from_slice(&p[..n1]);
                w2.data_mut().copy_from_slice(&p[n1..]);
            }
            AdapterParam::Rank1 { u, v } => {
                let n = u.len();
                u.copy_from_slice(&p[..n]);
                v.copy_from_slice(&p[n..]);
            }
            AdapterParam::Vector { v } => v.copy_from_slice(p),
        }
        Ok(())
    }

    /// Output factor (`W₂` of a bottleneck, `u` of a rank-1 adapter).
    pub fn output_factor(&self) -> Option<DenseMatrix> {
        match &self.param {
            AdapterParam::Bottleneck { w2, .. } => Some(w2.clone()),
            AdapterParam::Rank1 { u, .. } => DenseMatrix::from_columns(std::slice::from_ref(u)).ok(),
            _ => None,
        }
    }
}

/// Shorthand for [`SteeringAdapter::apply`].
pub fn apply_steering(ad: &SteeringAdapter, h: &[f64]) -> Result<DenseVector> {
    ad.apply(h)
}

/// Which GLU matrix a weight update modifies.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum WeightTarget {
    #[serde(rename = "w_g")]
    Gate,
    #[serde(rename = "w_u")]
    Up,
    #[serde(rename = "w_d")]
    Down,
}

impl WeightTarget {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightTarget::Gate => "w_g",
            WeightTarget::Up => "w_u",
            WeightTarget::Down => "w_d",
        }
    }

    /// Shape `(out, in)` of the targeted matrix.
    pub fn shape(self, p: &GluParams) -> (usize, usize) {
        self.weight(p).shape()
    }

    pub fn weight(self, p: &GluParams) -> &DenseMatrix {
        match self {
            WeightTarget::Gate => &p.w_g,
            WeightTarget::Up => &p.w_u,
            WeightTarget::Down => &p.w_d,
        }
    }

    pub(crate) fn weight_mut(self, p: &mut GluParams) -> &mut DenseMatrix {
        match self {
            WeightTarget::Gate => &mut p.w_g,
            WeightTarget::Up => &mut p.w_u,
            WeightTarget::Down => &mut p.w_d,
        }
    }
}

impl FromStr for WeightTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "w_g" => Ok(WeightTarget::Gate),
            "w_u" => Ok(WeightTarget::Up),
            "w_d" => Ok(WeightTarget::Down),
            other => Err(Error::UnknownTarget(other.to_string())),
        }
    }
}

fn default_scale() -> f64 {
    1.0
}

/// Low-rank update `δW = scale · B·A` of one GLU weight.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightUpdate {
    pub target: WeightTarget,
    /// `out × r`
    pub b: DenseMatrix,
    /// `r × in`
    pub a: DenseMatrix,
    #[serde(default = "default_scale")]
    pub scale: f64,
}

impl WeightUpdate {
    pub fn new(target: WeightTarget, b: DenseMatrix, a: DenseMatrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(dim_err("WeightUpdate", format!("a with {} rows", b.cols()), a.rows()));
        }
        Ok(Self { target, b, a, scale: 1.0 })
    }

    /// LoRA-style start: `B = 0`, `A ~ U(±1/√in)`.
    pub fn init(target: WeightTarget, out: usize, inp: usize, r: usize, rng: &mut impl Rng) -> Self {
        Self {
            target,
            b: DenseMatrix::zeros(out, r),
            a: rng::uniform_matrix(r, inp, 1.0 / (inp as f64).sqrt(), rng),
            scale: 1.0,
        }
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    pub fn delta(&self) -> DenseMatrix {
        self.b.matmul(&self.a).expect("validated shapes").scale(self.scale)
    }

    pub fn num_params(&self) -> usize {
        self.b.data().len() + self.a.data().len()
    }

    pub fn params_flat(&self) -> DenseVector {
        [self.b.data(), self.a.data()].concat()
    }

    pub fn set_params_flat(&mut self, p: &[f64]) -> Result<()> {
        vecops::check_len("WeightUpdate::set_params_flat", p, self.num_params())?;
        let nb = self.b.data().len();
        self.b.data_mut().copy_from_slice(&p[..nb]);
        self.a.data_mut().copy_from_slice(&p[nb..]);
        Ok(())
    }

    /// Chain rule from `∂L/∂W` to `(∂L/∂B, ∂L/∂A)`, flattened.
    pub fn backward(&self, grad_w: &DenseMatrix) -> Result<DenseVector> {
        let gb = grad_w.matmul_t(&self.a)?.scale(self.scale);
        let ga = self.b.t_matmul(grad_w)?.scale(self.scale);
        Ok([gb.data(), ga.data()].concat())
    }
}

/// Copy of `p` with `scale · B·A` added to the targeted weight.
pub fn apply_weight_update(p: &GluParams, w: &WeightUpdate) -> Result<GluParams> {
    let (out, inp) = w.target.shape(p);
    if w.b.rows() != out || w.a.cols() != inp {
        return Err(dim_err(
            "apply_weight_update",
            format!("{} update of shape {:?}", w.target.as_str(), (out, inp)),
            format!("{:?}", (w.b.rows(), w.a.cols())),
        ));
    }
    let mut q = p.clone();
    w.target.weight_mut(&mut q).add_scaled(&w.delta(), 1.0)?;
    Ok(q)
}

/// A post-block bottleneck trained together with a weight update.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointAdapter {
    pub steer: SteeringAdapter,
    pub wupd: WeightUpdate,
    pub orth_enabled: bool,
}

impl JointAdapter {
    pub fn new(steer: SteeringAdapter, wupd: WeightUpdate, orth_enabled: bool) -> Result<Self> {
        if !matches!(steer.param, AdapterParam::Bottleneck { .. }) {
            return Err(Error::Config(format!(
                "joint adapter needs a bottleneck steering adapter, got {}",
                steer.kind()
            )));
        }
        if steer.dim() != wupd.b.rows() {
            return Err(dim_err("JointAdapter", steer.dim(), wupd.b.rows()));
        }
        Ok(Self {
            steer,
            wupd,
            orth_enabled,
        })
    }

    /// Largest `|cos|` between a column of `W₂` and a column of `B`.
    /// Columns with negligible norm are skipped.
    pub fn orthogonality_defect(&self) -> f64 {
        let Some(w2) = self.steer.output_factor() else {
            return 0.0;
        };
        max_column_cosine(&w2, &self.wupd.b)
    }
}

pub(crate) fn max_column_cosine(x: &DenseMatrix, y: &DenseMatrix) -> f64 {
    let significant = |m: &DenseMatrix| -> Vec<DenseVector> {
        let cols = m.columns();
        let top = cols.iter().map(|c| vecops::norm(c)).fold(0.0, f64::max);
        let floor = 1e-12 * top.max(1.0);
        cols.into_iter().filter(|c| vecops::norm(c) > floor).collect()
    };
    let xs = significant(x);
    let ys = significant(y);
    let mut worst: f64 = 0.0;
    for xc in &xs {
        for yc in &ys {
            if let Some(c) = vecops::cosine(xc, yc) {
                worst = worst.max(c.abs());
            }
        }
    }
    worst
}

/// Replaces `W₂` by `(I − VVᵀ) W₂` with `V` an orthonormal basis of
/// `colspace(B)`. The weight update is left unchanged.
pub fn project_orthogonal(j: &JointAdapter) -> Result<JointAdapter> {
    if !j.orth_enabled {
        return Err(Error::Precondition("orthogonal projection requested with orth_enabled = false".into()));
    }
    let basis = orthonormal_basis(&j.wupd.b, RANK_TOL)?;
    let mut out = j.clone();
    if basis.cols() == 0 {
        return Ok(out);
    }
    if let AdapterParam::Bottleneck { w2, .. } = &mut out.steer.param {
        *w2 = project_out(w2, &basis)?;
    }
    Ok(out)
}

/// `(I − VVᵀ) X` for orthonormal `V`.
pub(crate) fn project_out(x: &DenseMatrix, basis: &DenseMatrix) -> Result<DenseMatrix> {
    let coeffs = basis.t_matmul(x)?;
    x.sub(&basis.matmul(&coeffs)?)
}

/// Adapters indexed by locus; at most one per locus.
#[derive(Clone, Debug, Default)]
pub(crate) struct LocusSlots<'a> {
    pub pre_mlp: Option<&'a SteeringAdapter>,
    pub post_mlp: Option<&'a SteeringAdapter>,
    pub post_block: Option<&'a SteeringAdapter>,
}

impl<'a> LocusSlots<'a> {
    pub fn from_adapters(adapters: &'a [SteeringAdapter], d_model: usize) -> Result<Self> {
        let mut seen = BTreeSet::new();
        let mut slots = Self::default();
        for ad in adapters {
            if !seen.insert(ad.locus) {
                return Err(Error::Config(format!(
                    "two adapters at locus {}; compose them into one adapter instead",
                    ad.locus
                )));
            }
            if ad.dim() != d_model {
                return Err(dim_err("steered_block_forward", d_model, ad.dim()));
            }
            match ad.locus {
                Locus::PreMlp => slots.pre_mlp = Some(ad),
                Locus::PostMlp => slots.post_mlp = Some(ad),
                Locus::PostBlock => slots.post_block = Some(ad),
            }
        }
        Ok(slots)
    }
}

/// Block forward pass with steering adapters inserted at their loci and the
/// weight updates folded into the GLU first.
///
/// The trace's `post_mlp` holds the (possibly steered) MLP output and
/// `post_block` the final residual after any post-block adapter.
pub fn steered_block_forward(
    glu: &GluParams,
    attn: &AttnParams,
    adapters: &[SteeringAdapter],
    wupds: &[WeightUpdate],
    hs: &[DenseVector],
    opts: BlockOptions,
) -> Result<BlockTrace> {
    let slots = LocusSlots::from_adapters(adapters, glu.d_model())?;
    let mut eff = glu.clone();
    for w in wupds {
        eff = apply_weight_update(&eff, w)?;
    }
    let post_attn = nanomodel::attn_forward(attn, hs, opts.causal)?;
    let mut post_mlp = Vec::with_capacity(hs.len());
    let mut post_block = Vec::with_capacity(hs.len());
    for y in &post_attn {
        let mut u = nanomodel::mlp_input(y, opts)?;
        if let Some(ad) = slots.pre_mlp {
            u = ad.apply(&u)?;
        }
        let mut x = nanomodel::glu_forward(&eff, &u)?;
        if let Some(ad) = slots.post_mlp {
            x = ad.apply(&x)?;
        }
        let mut z = vecops::add(y, &x);
        if let Some(ad) = slots.post_block {
            z = ad.apply(&z)?;
        }
        post_mlp.push(x);
        post_block.push(z);
    }
    Ok(BlockTrace {
        h_in: hs.to_vec(),
        post_attn,
        post_mlp,
        post_block,
    })
}
