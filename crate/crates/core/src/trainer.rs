//! Plain gradient descent for steering adapters and low-rank weight updates,
//! with analytic gradients checked against central finite differences.

use std::collections::BTreeSet;

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::adapters::{
    apply_weight_update, project_orthogonal, AdapterParam, JointAdapter, Locus, SteeringAdapter, WeightTarget,
    WeightUpdate,
};
use crate::error::{dim_err, Error, Result};
use crate::nanomodel::{self, AttnParams, BlockOptions, GluActivations, GluParams, TraceSite};
use crate::numkit::{orthonormal_basis, svd, vecops, DenseMatrix, DenseVector, RANK_TOL};
use crate::rng;
use crate::subspace::compute_oracle;

/// Central-difference step for gradient checks.
pub const FD_STEP: f64 = 1e-5;
/// Largest relative error accepted by the mandatory step-0 gradient check.
pub const GRAD_CHECK_TOL: f64 = 1e-5;
/// Consecutive loss increases that trigger a learning-rate halving.
pub const HALVING_PATIENCE: usize = 10;
pub const MAX_HALVINGS: usize = 10;
/// Loss curves are decimated to at most this many points.
pub const MAX_CURVE_POINTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectiveKind {
    OracleMatch,
    TargetRegression,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Trainable {
    Steering,
    Weight,
    Joint,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OrthCadence {
    EveryStep,
    #[default]
    Never,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub objective: ObjectiveKind,
    pub trainables: BTreeSet<Trainable>,
    #[serde(default)]
    pub orth_cadence: OrthCadence,
    pub seed: u64,
    /// Coordinates probed by the step-0 gradient check.
    #[serde(default = "default_probes")]
    pub grad_check_probes: usize,
    /// Stop once the loss is at or below this value.
    #[serde(default)]
    pub loss_tol: f64,
}

fn default_probes() -> usize {
    32
}

impl TrainConfig {
    pub fn new(lr: f64, steps: usize, objective: ObjectiveKind, trainables: &[Trainable], seed: u64) -> Self {
        Self {
            lr,
            steps,
            objective,
            trainables: trainables.iter().copied().collect(),
            orth_cadence: OrthCadence::Never,
            seed,
            grad_check_probes: default_probes(),
            loss_tol: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be at least 1".into()));
        }
        if self.trainables.is_empty() {
            return Err(Error::Config("nothing to train".into()));
        }
        Ok(())
    }

    fn joint(&self) -> bool {
        self.trainables.contains(&Trainable::Joint)
            || (self.trainables.contains(&Trainable::Steering) && self.trainables.contains(&Trainable::Weight))
    }
}

/// Learned quantities at the end of training.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FinalParams {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub steering: Option<SteeringAdapter>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub weight: Option<WeightUpdate>,
    /// `δh` of a hybrid objective.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_h: Option<DenseMatrix>,
    /// `δW` of a hybrid objective.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub delta_w: Option<DenseMatrix>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub config: TrainConfig,
    pub seed: u64,
    pub loss_curve: Vec<f64>,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub steps_run: usize,
    pub final_lr: f64,
    pub halvings: usize,
    pub final_params: FinalParams,
    pub grad_check_max_rel_err: f64,
    /// Largest orthogonality defect after any projected step (0 without projection).
    pub max_constraint_defect: f64,
}

/// A differentiable training objective over a flat parameter vector.
pub trait Objective {
    fn num_params(&self) -> usize;
    fn params(&self) -> DenseVector;
    fn set_params(&mut self, p: &[f64]) -> Result<()>;
    fn loss(&self) -> Result<f64>;
    /// Loss and its gradient with respect to [`Objective::params`].
    fn gradient(&self) -> Result<(f64, DenseVector)>;
    /// Applies the orthogonality projection, if this objective has one.
    fn project(&mut self) -> Result<()> {
        Ok(())
    }
    fn constraint_defect(&self) -> f64 {
        0.0
    }
    fn export(&self) -> FinalParams;
}

/// Largest relative error between analytic and central-difference gradients
/// over `probe_count` random coordinates (all coordinates if there are fewer).
///
/// The relative error uses `max(|a|, |f|, 1e-6·(1 + |L|))` as denominator so
/// coordinates with vanishing gradient are judged on an absolute scale tied
/// to the loss.
pub fn grad_check(obj: &mut dyn Objective, probe_count: usize, seed: u64) -> Result<f64> {
    let n = obj.num_params();
    if n == 0 {
        return Ok(0.0);
    }
    let (loss, grad) = obj.gradient()?;
    let base = obj.params();
    let coords: Vec<usize> = if probe_count >= n {
        (0..n).collect()
    } else {
        let mut r = rng::stream(seed, u64::MAX);
        let mut idx = sample(&mut r, n, probe_count).into_vec();
        idx.sort_unstable();
        idx
    };
    let floor = 1e-6 * (1.0 + loss.abs());
    let mut worst: f64 = 0.0;
    let mut p = base.clone();
    for j in coords {
        p[j] = base[j] + FD_STEP;
        obj.set_params(&p)?;
        let up = obj.loss()?;
        p[j] = base[j] - FD_STEP;
        obj.set_params(&p)?;
        let down = obj.loss()?;
        p[j] = base[j];
        let fd = (up - down) / (2.0 * FD_STEP);
        let a = grad[j];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(floor));
    }
    obj.set_params(&base)?;
    Ok(worst)
}

fn decimate(curve: &[f64]) -> Vec<f64> {
    if curve.len() <= MAX_CURVE_POINTS {
        return curve.to_vec();
    }
    let last = curve.len() - 1;
    (0..MAX_CURVE_POINTS)
        .map(|i| curve[i * last / (MAX_CURVE_POINTS - 1)])
        .collect()
}

/// Gradient descent on `obj` with the halving rule and a mandatory step-0
/// gradient check.
pub fn train(cfg: &TrainConfig, obj: &mut dyn Objective) -> Result<TrainResult> {
    cfg.validate()?;
    let project = cfg.orth_cadence == OrthCadence::EveryStep && cfg.joint();
    let grad_err = grad_check(obj, cfg.grad_check_probes, cfg.seed)?;
    if !(grad_err <= GRAD_CHECK_TOL) {
        return Err(Error::GradCheck(grad_err));
    }

    let mut lr = cfg.lr;
    let mut halvings = 0;
    let mut increases = 0;
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    let mut max_defect: f64 = 0.0;
    let initial_loss = obj.loss()?;
    if !initial_loss.is_finite() {
        return Err(Error::Divergence { step: 0, loss: initial_loss });
    }
    curve.push(initial_loss);
    let mut prev = initial_loss;
    let mut steps_run = 0;
    for step in 0..cfg.steps {
        if prev <= cfg.loss_tol {
            break;
        }
        let (_, g) = obj.gradient()?;
        let mut p = obj.params();
        vecops::axpy(&mut p, -lr, &g);
        obj.set_params(&p)?;
        if project {
            obj.project()?;
            max_defect = max_defect.max(obj.constraint_defect());
        }
        let loss = obj.loss()?;
        steps_run = step + 1;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        curve.push(loss);
        if loss > prev {
            increases += 1;
            if increases >= HALVING_PATIENCE && halvings < MAX_HALVINGS {
                lr *= 0.5;
                halvings += 1;
                increases = 0;
            }
        } else {
            increases = 0;
        }
        prev = loss;
    }
    Ok(TrainResult {
        config: cfg.clone(),
        seed: cfg.seed,
        loss_curve: decimate(&curve),
        initial_loss,
        final_loss: prev,
        steps_run,
        final_lr: lr,
        halvings,
        final_params: obj.export(),
        grad_check_max_rel_err: grad_err,
        max_constraint_defect: max_defect,
    })
}

/// Gradients of `½‖W_d(φ(W_g u) ⊙ W_u u) − ·‖²`-style losses through one GLU.
pub(crate) struct GluGrads {
    pub w_g: DenseMatrix,
    pub w_u: DenseMatrix,
    pub w_d: DenseMatrix,
    pub input: DenseVector,
}

/// Backward pass through the GLU given `g = ∂L/∂out`.
pub(crate) fn glu_backward(p: &GluParams, acts: &GluActivations, u: &[f64], g: &[f64]) -> Result<GluGrads> {
    let g_m = p.w_d.t_matvec(g)?;
    let g_ag = vecops::hadamard(&vecops::hadamard(&g_m, &acts.a_u), &p.phi.derivative_vec(&acts.a_g));
    let g_au = vecops::hadamard(&g_m, &acts.gate);
    let input = vecops::add(&p.w_g.t_matvec(&g_ag)?, &p.w_u.t_matvec(&g_au)?);
    Ok(GluGrads {
        w_g: DenseMatrix::outer(&g_ag, u),
        w_u: DenseMatrix::outer(&g_au, u),
        w_d: DenseMatrix::outer(g, &acts.m),
        input,
    })
}

/// Block-output regression with a steering adapter and/or a weight update on
/// the GLU. Attention weights are frozen, so post-attention states are cached.
#[derive(Clone, Debug)]
pub struct BlockObjective {
    glu: GluParams,
    opts: BlockOptions,
    post_attn: Vec<DenseVector>,
    targets: Vec<DenseVector>,
    pub steering: Option<SteeringAdapter>,
    pub weight: Option<WeightUpdate>,
}

impl BlockObjective {
    /// `seqs[s]` is one input sequence and `targets[s]` the wanted block
    /// outputs at each of its positions.
    pub fn new(
        glu: &GluParams,
        attn: &AttnParams,
        opts: BlockOptions,
        seqs: &[Vec<DenseVector>],
        targets: &[Vec<DenseVector>],
        steering: Option<SteeringAdapter>,
        weight: Option<WeightUpdate>,
    ) -> Result<Self> {
        if seqs.is_empty() {
            return Err(Error::Precondition("training data is empty".into()));
        }
        if seqs.len() != targets.len() {
            return Err(dim_err("BlockObjective", format!("{} target sequences", seqs.len()), targets.len()));
        }
        let d = glu.d_model();
        if attn.d_model() != d {
            return Err(dim_err("BlockObjective attention", d, attn.d_model()));
        }
        if let Some(ad) = &steering {
            if ad.dim() != d {
                return Err(dim_err("BlockObjective adapter", d, ad.dim()));
            }
        }
        if let Some(w) = &weight {
            apply_weight_update(glu, w)?;
        }
        let mut post_attn = Vec::new();
        let mut flat_targets = Vec::new();
        for (hs, ts) in seqs.iter().zip(targets) {
            if hs.len() != ts.len() {
                return Err(dim_err("BlockObjective targets", hs.len(), ts.len()));
            }
            for t in ts {
                vecops::check_len("BlockObjective target", t, d)?;
            }
            post_attn.extend(nanomodel::attn_forward(attn, hs, opts.causal)?);
            flat_targets.extend(ts.iter().cloned());
        }
        Ok(Self {
            glu: glu.clone(),
            opts,
            post_attn,
            targets: flat_targets,
            steering,
            weight,
        })
    }

    fn effective_glu(&self) -> Result<GluParams> {
        match &self.weight {
            Some(w) => apply_weight_update(&self.glu, w),
            None => Ok(self.glu.clone()),
        }
    }

    fn locus(&self) -> Option<Locus> {
        self.steering.as_ref().map(|a| a.locus)
    }

    /// Block outputs with the current parameters, one per cached position.
    pub fn outputs(&self) -> Result<Vec<DenseVector>> {
        let glu = self.effective_glu()?;
        self.post_attn.iter().map(|y| Ok(self.forward_one(&glu, y)?.out)).collect()
    }

    fn forward_one(&self, glu: &GluParams, y: &[f64]) -> Result<Forward> {
        let u0 = nanomodel::mlp_input(y, self.opts)?;
        let u = match (&self.steering, self.locus()) {
            (Some(ad), Some(Locus::PreMlp)) => ad.apply(&u0)?,
            _ => u0.clone(),
        };
        let acts = nanomodel::glu_activations(glu, &u)?;
        let x = match (&self.steering, self.locus()) {
            (Some(ad), Some(Locus::PostMlp)) => ad.apply(&acts.out)?,
            _ => acts.out.clone(),
        };
        let z0 = vecops::add(y, &x);
        let out = match (&self.steering, self.locus()) {
            (Some(ad), Some(Locus::PostBlock)) => ad.apply(&z0)?,
            _ => z0.clone(),
        };
        Ok(Forward { u0, u, acts, z0, out })
    }

    /// `‖outputs − targets‖_F` over all positions.
    pub fn residual_norm(&self) -> Result<f64> {
        Ok(vecops::seq_distance(&self.outputs()?, &self.targets))
    }

    pub fn targets(&self) -> &[DenseVector] {
        &self.targets
    }
}

struct Forward {
    u0: DenseVector,
    u: DenseVector,
    acts: GluActivations,
    z0: DenseVector,
    out: DenseVector,
}

impl Objective for BlockObjective {
    fn num_params(&self) -> usize {
        self.steering.as_ref().map_or(0, |a| a.num_params()) + self.weight.as_ref().map_or(0, |w| w.num_params())
    }

    fn params(&self) -> DenseVector {
        let mut p = self.steering.as_ref().map_or_else(Vec::new, |a| a.params_flat());
        if let Some(w) = &self.weight {
            p.extend(w.params_flat());
        }
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        vecops::check_len("BlockObjective::set_params", p, self.num_params())?;
        let ns = self.steering.as_ref().map_or(0, |a| a.num_params());
        if let Some(a) = &mut self.steering {
            a.set_params_flat(&p[..ns])?;
        }
        if let Some(w) = &mut self.weight {
            w.set_params_flat(&p[ns..])?;
        }
        Ok(())
    }

    fn loss(&self) -> Result<f64> {
        let outs = self.outputs()?;
        let n = outs.len() as f64;
        Ok(0.5 * vecops::seq_distance(&outs, &self.targets).powi(2) / n)
    }

    fn gradient(&self) -> Result<(f64, DenseVector)> {
        let glu = self.effective_glu()?;
        let n = self.post_attn.len() as f64;
        let ns = self.steering.as_ref().map_or(0, |a| a.num_params());
        let mut g_steer = vec![0.0; ns];
        let mut g_w = self.weight.as_ref().map(|w| {
            let (r, c) = w.target.shape(&glu);
            DenseMatrix::zeros(r, c)
        });
        let mut sq = 0.0;
        for (y, t) in self.post_attn.iter().zip(&self.targets) {
            let f = self.forward_one(&glu, y)?;
            let err = vecops::sub(&f.out, t);
            sq += vecops::dot(&err, &err);
            let mut g = vecops::scale(&err, 1.0 / n);

            if let (Some(ad), Some(Locus::PostBlock)) = (&self.steering, self.locus()) {
                let (gp, gz) = ad.backward(&f.z0, &g)?;
                vecops::axpy(&mut g_steer, 1.0, &gp);
                g = gz;
            }
            // g is now ∂L/∂x (skip path carries it to y, which is frozen).
            if let (Some(ad), Some(Locus::PostMlp)) = (&self.steering, self.locus()) {
                let (gp, gx) = ad.backward(&f.acts.out, &g)?;
                vecops::axpy(&mut g_steer, 1.0, &gp);
                g = gx;
            }
            let needs_glu = g_w.is_some() || self.locus() == Some(Locus::PreMlp);
            if needs_glu {
                let gg = glu_backward(&glu, &f.acts, &f.u, &g)?;
                if let (Some(acc), Some(w)) = (&mut g_w, &self.weight) {
                    let gm = match w.target {
                        WeightTarget::Gate => &gg.w_g,
                        WeightTarget::Up => &gg.w_u,
                        WeightTarget::Down => &gg.w_d,
                    };
                    acc.add_scaled(gm, 1.0)?;
                }
                if let (Some(ad), Some(Locus::PreMlp)) = (&self.steering, self.locus()) {
                    let (gp, _) = ad.backward(&f.u0, &gg.input)?;
                    vecops::axpy(&mut g_steer, 1.0, &gp);
                }
            }
        }
        let mut grad = g_steer;
        if let (Some(acc), Some(w)) = (&g_w, &self.weight) {
            grad.extend(w.backward(acc)?);
        }
        Ok((0.5 * sq / n, grad))
    }

    fn project(&mut self) -> Result<()> {
        let (Some(steer), Some(weight)) = (&self.steering, &self.weight) else {
            return Ok(());
        };
        let joint = JointAdapter::new(steer.clone(), weight.clone(), true)?;
        self.steering = Some(project_orthogonal(&joint)?.steer);
        Ok(())
    }

    fn constraint_defect(&self) -> f64 {
        match (&self.steering, &self.weight) {
            (Some(s), Some(w)) => JointAdapter::new(s.clone(), w.clone(), true)
                .map(|j| j.orthogonality_defect())
                .unwrap_or(0.0),
            _ => 0.0,
        }
    }

    fn export(&self) -> FinalParams {
        FinalParams {
            steering: self.steering.clone(),
            weight: self.weight.clone(),
            ..FinalParams::default()
        }
    }
}

/// `ĝ(x) = (I + δh)(x + (W + δW) F(x))` over fixed samples, either factor
/// optionally frozen at zero.
#[derive(Clone, Debug)]
pub struct HybridObjective {
    x: DenseMatrix,
    f: DenseMatrix,
    w: DenseMatrix,
    targets: DenseMatrix,
    pub delta_h: DenseMatrix,
    pub delta_w: DenseMatrix,
    train_h: bool,
    train_w: bool,
}

impl HybridObjective {
    /// `x, targets: d×n`, `f: p×n` (features evaluated at the samples), `w: d×p`.
    pub fn new(
        x: DenseMatrix,
        f: DenseMatrix,
        w: DenseMatrix,
        targets: DenseMatrix,
        train_h: bool,
        train_w: bool,
    ) -> Result<Self> {
        let (d, n) = x.shape();
        if n == 0 {
            return Err(Error::Precondition("training data is empty".into()));
        }
        if targets.shape() != (d, n) || f.cols() != n || w.shape() != (d, f.rows()) {
            return Err(dim_err(
                "HybridObjective",
                format!("x {:?}", (d, n)),
                format!("f {:?}, w {:?}, targets {:?}", f.shape(), w.shape(), targets.shape()),
            ));
        }
        if !train_h && !train_w {
            return Err(Error::Config("HybridObjective needs at least one trainable factor".into()));
        }
        let p = f.rows();
        Ok(Self {
            x,
            f,
            w,
            targets,
            delta_h: DenseMatrix::zeros(d, d),
            delta_w: DenseMatrix::zeros(d, p),
            train_h,
            train_w,
        })
    }

    fn inner(&self) -> Result<DenseMatrix> {
        self.x.add(&self.w.add(&self.delta_w)?.matmul(&self.f)?)
    }

    pub fn outputs(&self) -> Result<DenseMatrix> {
        self.inner()?.add(&self.delta_h.matmul(&self.inner()?)?)
    }
}

impl Objective for HybridObjective {
    fn num_params(&self) -> usize {
        let mut n = 0;
        if self.train_h {
            n += self.delta_h.data().len();
        }
        if self.train_w {
            n += self.delta_w.data().len();
        }
        n
    }

    fn params(&self) -> DenseVector {
        let mut p = Vec::with_capacity(self.num_params());
        if self.train_h {
            p.extend_from_slice(self.delta_h.data());
        }
        if self.train_w {
            p.extend_from_slice(self.delta_w.data());
        }
        p
    }

    fn set_params(&mut self, p: &[f64]) -> Result<()> {
        vecops::check_len("HybridObjective::set_params", p, self.num_params())?;
        let mut off = 0;
        if self.train_h {
            let n = self.delta_h.data().len();
            self.delta_h.data_mut().copy_from_slice(&p[..n]);
            off = n;
        }
        if self.train_w {
            self.delta_w.data_mut().copy_from_slice(&p[off..]);
        }
        Ok(())
    }

    fn loss(&self) -> Result<f64> {
        let n = self.x.cols() as f64;
        Ok(0.5 * self.outputs()?.sub(&self.targets)?.frobenius_norm_sq() / n)
    }

    fn gradient(&self) -> Result<(f64, DenseVector)> {
        let n = self.x.cols() as f64;
        let y = self.inner()?;
        let e = y.add(&self.delta_h.matmul(&y)?)?.sub(&self.targets)?;
        let mut grad = Vec::with_capacity(self.num_params());
        if self.train_h {
            grad.extend(e.matmul_t(&y)?.scale(1.0 / n).into_data());
        }
        if self.train_w {
            let d = self.x.rows();
            let lhs = DenseMatrix::identity(d).add(&self.delta_h)?;
            grad.extend(lhs.t_matmul(&e)?.matmul_t(&self.f)?.scale(1.0 / n).into_data());
        }
        Ok((0.5 * e.frobenius_norm_sq() / n, grad))
    }

    /// Removes the leading left singular direction of `δW` from `δh`.
    fn project(&mut self) -> Result<()> {
        let s = svd(&self.delta_w)?;
        if s.numerical_rank() == 0 {
            return Ok(());
        }
        self.delta_h = crate::adapters::project_out(&self.delta_h, &s.left_vectors(1))?;
        Ok(())
    }

    fn constraint_defect(&self) -> f64 {
        let s = match svd(&self.delta_w) {
            Ok(s) if s.numerical_rank() > 0 => s,
            _ => return 0.0,
        };
        crate::adapters::max_column_cosine(&self.delta_h, &s.left_vectors(1))
    }

    fn export(&self) -> FinalParams {
        FinalParams {
            delta_h: Some(self.delta_h.clone()),
            delta_w: Some(self.delta_w.clone()),
            ..FinalParams::default()
        }
    }
}

/// Closed-form least-squares floors of the 2D example for target
/// `(γ₁x + γ₂F(x), 0)` with `F = ReLU` and `x` on the first axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Joint2dFloors {
    /// Best `α₁` of `x ↦ (x + α₁F(x), α₂F(x))` (`α₂ = 0` is optimal).
    pub alpha1: f64,
    /// Best `β₁` of `x ↦ (β₁(x + F(x)), β₂(x + F(x)))` (`β₂ = 0` is optimal).
    pub beta1: f64,
    /// Loss floor of weight-only training, in the trainer's loss units.
    pub ft_floor: f64,
    /// Loss floor of steering-only training.
    pub steer_floor: f64,
}

pub fn joint2d_floors(xs: &[f64], gamma: (f64, f64)) -> Result<Joint2dFloors> {
    if xs.is_empty() {
        return Err(Error::Precondition("no samples".into()));
    }
    let relu = |x: f64| x.max(0.0);
    let t: Vec<f64> = xs.iter().map(|&x| gamma.0 * x + gamma.1 * relu(x)).collect();
    let r: Vec<f64> = xs.iter().map(|&x| relu(x)).collect();
    let s: Vec<f64> = xs.iter().zip(&r).map(|(x, r)| x + r).collect();
    let rr = vecops::dot(&r, &r);
    let alpha1 = if rr > 0.0 {
        r.iter().zip(xs).zip(&t).map(|((r, x), t)| r * (t - x)).sum::<f64>() / rr
    } else {
        0.0
    };
    let ss = vecops::dot(&s, &s);
    let beta1 = if ss > 0.0 { vecops::dot(&s, &t) / ss } else { 0.0 };
    let n = xs.len() as f64;
    let ft_sq: f64 = xs.iter().zip(&r).zip(&t).map(|((x, r), t)| (x + alpha1 * r - t).powi(2)).sum();
    let st_sq: f64 = s.iter().zip(&t).map(|(s, t)| (beta1 * s - t).powi(2)).sum();
    Ok(Joint2dFloors {
        alpha1,
        beta1,
        ft_floor: 0.5 * ft_sq / n,
        steer_floor: 0.5 * st_sq / n,
    })
}

/// The 2D example as a [`HybridObjective`]: `x = (x₁, 0)`, `F = ReLU`, `W = I`.
pub fn joint2d_objective(xs: &[f64], gamma: (f64, f64), train_h: bool, train_w: bool) -> Result<HybridObjective> {
    let n = xs.len();
    let x = DenseMatrix::from_fn(2, n, |i, j| if i == 0 { xs[j] } else { 0.0 });
    let f = DenseMatrix::from_fn(2, n, |i, j| x[(i, j)].max(0.0));
    let t = DenseMatrix::from_fn(2, n, |i, j| if i == 0 { gamma.0 * xs[j] + gamma.1 * xs[j].max(0.0) } else { 0.0 });
    HybridObjective::new(x, f, DenseMatrix::identity(2), t, train_h, train_w)
}

/// Relative residuals of a trained oracle-matching adapter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleFitResult {
    pub train: TrainResult,
    /// `‖fit − δ‖ / ‖δ‖`, 0 when both vanish.
    pub rel_residual_oracle: f64,
    /// `‖fit − δ‖ / ‖H_FT‖`.
    pub rel_residual_state: f64,
}

/// Trains `adapter` (placed at its own locus) so the steered base block
/// reproduces the fine-tuned block output; the oracle is taken at `site`,
/// which must be the block output.
pub fn fit_oracle_adapter(
    base: (&GluParams, &AttnParams),
    ft: (&GluParams, &AttnParams),
    site: TraceSite,
    adapter: SteeringAdapter,
    seqs: &[Vec<DenseVector>],
    opts: BlockOptions,
    cfg: &TrainConfig,
) -> Result<OracleFitResult> {
    if site != TraceSite::PostBlock {
        return Err(Error::Config("adapters are fitted against the block-output oracle".into()));
    }
    let mut targets = Vec::with_capacity(seqs.len());
    let mut oracle_sq = 0.0;
    for hs in seqs {
        let b = nanomodel::block_forward(base.0, base.1, hs, opts)?;
        let f = nanomodel::block_forward(ft.0, ft.1, hs, opts)?;
        let o = compute_oracle(&b, &f, site)?;
        oracle_sq += vecops::seq_norm(&o.delta).powi(2);
        targets.push(f.post_block);
    }
    let mut obj = BlockObjective::new(base.0, base.1, opts, seqs, &targets, Some(adapter), None)?;
    let train = train(cfg, &mut obj)?;
    let resid = obj.residual_norm()?;
    let state = vecops::seq_norm(obj.targets());
    let on = oracle_sq.sqrt();
    Ok(OracleFitResult {
        train,
        rel_residual_oracle: if on > 0.0 { resid / on } else { resid },
        rel_residual_state: if state > 0.0 { resid / state } else { resid },
    })
}

/// Orthonormal basis of the steering output factor, for diagnostics.
pub fn output_basis(ad: &SteeringAdapter) -> Result<Option<DenseMatrix>> {
    match &ad.param {
        AdapterParam::Bottleneck { w2, .. } => Ok(Some(orthonormal_basis(w2, RANK_TOL)?)),
        _ => Ok(None),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nanomodel::{block_forward, Activation};
    use crate::rng::{gaussian_vector, seeded};

    fn toy(seed: u64) -> (GluParams, AttnParams, Vec<Vec<DenseVector>>) {
        let mut rng = seeded(seed);
        let glu = GluParams::random(4, 6, Activation::Sigmoid, 1.0, &mut rng);
        let attn = AttnParams::random(4, 1.0, &mut rng);
        let seqs = (0..3)
            .map(|_| (0..3).map(|_| gaussian_vector(4, 1.0, &mut rng)).collect())
            .collect();
        (glu, attn, seqs)
    }

    fn base_targets(glu: &GluParams, attn: &AttnParams, seqs: &[Vec<DenseVector>]) -> Vec<Vec<DenseVector>> {
        seqs.iter()
            .map(|hs| block_forward(glu, attn, hs, BlockOptions::default()).unwrap().post_block)
            .collect()
    }

    #[test]
    fn base_targets_keep_zero_parameters() {
        let (glu, attn, seqs) = toy(1);
        let targets = base_targets(&glu, &attn, &seqs);
        let ad = SteeringAdapter::zeros(Locus::PostBlock, "full", 4, 1).unwrap();
        let mut obj = BlockObjective::new(&glu, &attn, BlockOptions::default(), &seqs, &targets, Some(ad), None).unwrap();
        let cfg = TrainConfig::new(0.1, 20, ObjectiveKind::TargetRegression, &[Trainable::Steering], 0);
        let r = train(&cfg, &mut obj).unwrap();
        assert!(r.final_loss < 1e-28);
        assert!(obj.params().iter().all(|&x| x.abs() < 1e-14));
        let (_, g) = obj.gradient().unwrap();
        assert!(g.iter().all(|&x| x.abs() < 1e-14));
    }

    #[test]
    fn gradients_match_finite_differences_at_every_locus() {
        let (glu, attn, seqs) = toy(2);
        let mut rng = seeded(9);
        let targets: Vec<Vec<DenseVector>> = base_targets(&glu, &attn, &seqs)
            .into_iter()
            .map(|ts| ts.into_iter().map(|t| vecops::add(&t, &gaussian_vector(4, 0.3, &mut rng))).collect())
            .collect();
        for locus in [Locus::PreMlp, Locus::PostMlp, Locus::PostBlock] {
            for kind in ["full", "bottleneck", "rank1", "vector"] {
                let mut ad = SteeringAdapter::zeros(locus, kind, 4, 2).unwrap();
                if let AdapterParam::Bottleneck { phi, .. } = &mut ad.param {
                    *phi = Activation::Silu;
                }
                let n = ad.num_params();
                ad.set_params_flat(&gaussian_vector(n, 0.3, &mut rng)).unwrap();
                let mut w = WeightUpdate::init(WeightTarget::Up, 6, 4, 2, &mut rng);
                w.b = rng::gaussian_matrix(6, 2, 0.2, &mut rng);
                let mut obj =
                    BlockObjective::new(&glu, &attn, BlockOptions::default(), &seqs, &targets, Some(ad), Some(w)).unwrap();
                let err = grad_check(&mut obj, 1000, 0).unwrap();
                assert!(err < 1e-6, "{locus} {kind}: {err:e}");
            }
        }
    }

    #[test]
    fn hybrid_gradient_and_floors() {
        let xs: Vec<f64> = (0..16).map(|i| -2.0 + 0.25 * i as f64 + 0.01).collect();
        let mut obj = joint2d_objective(&xs, (0.3, -0.7), true, true).unwrap();
        let p: Vec<f64> = (0..8).map(|i| 0.1 * (i as f64 - 3.5)).collect();
        obj.set_params(&p).unwrap();
        assert!(grad_check(&mut obj, 100, 0).unwrap() < 1e-7);

        let floors = joint2d_floors(&xs, (0.3, -0.7)).unwrap();
        let mut ft = joint2d_objective(&xs, (0.3, -0.7), false, true).unwrap();
        let mut dw = DenseMatrix::zeros(2, 2);
        dw[(0, 0)] = floors.alpha1 - 1.0;
        ft.set_params(dw.data()).unwrap();
        assert!((ft.loss().unwrap() - floors.ft_floor).abs() < 1e-12);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(0.0, 10, ObjectiveKind::OracleMatch, &[Trainable::Steering], 0);
        assert!(cfg.validate().is_err());
        cfg.lr = 0.1;
        cfg.steps = 0;
        assert!(cfg.validate().is_err());
    }
}
