//! Experiment registry, configuration and report emission.
//!
//! Every experiment is a pure function of its [`ExperimentConfig`]: trial `i`
//! draws from `rng::stream(seed, i)`, maps are ordered, and nothing
//! time-dependent reaches the output, so reports are byte-reproducible.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::adapters::{project_orthogonal, JointAdapter, Locus, SteeringAdapter, WeightTarget, WeightUpdate};
use crate::bounds::{self, Lemma, ScanConfig};
use crate::error::{Error, Result};
use crate::firstorder;
use crate::nanomodel::{self, check_dims, Activation, AttnParams, BlockOptions, GluParams};
use crate::numkit::{vecops, DenseMatrix, DenseVector};
use crate::rng;
use crate::subspace::{self, CollapseConfig};
use crate::trainer::{self, ObjectiveKind, Objective, TrainConfig, Trainable};

pub const SCHEMA: &str = "steerkit-report/1";
/// Overrides `--out` / `output_dir` when set.
pub const OUT_ENV: &str = "STEERKIT_OUT";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Experiment {
    FirstorderSlopes,
    Theorem1Scan,
    CollapseSim,
    OrthProjectionDemo,
    BoundsScan,
    OracleFit,
    Joint2d,
    MlpRatio,
}

impl Experiment {
    pub const ALL: [Experiment; 8] = [
        Experiment::FirstorderSlopes,
        Experiment::Theorem1Scan,
        Experiment::CollapseSim,
        Experiment::OrthProjectionDemo,
        Experiment::BoundsScan,
        Experiment::OracleFit,
        Experiment::Joint2d,
        Experiment::MlpRatio,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Experiment::FirstorderSlopes => "firstorder-slopes",
            Experiment::Theorem1Scan => "theorem1-scan",
            Experiment::CollapseSim => "collapse-sim",
            Experiment::OrthProjectionDemo => "orth-projection-demo",
            Experiment::BoundsScan => "bounds-scan",
            Experiment::OracleFit => "oracle-fit",
            Experiment::Joint2d => "joint-2d",
            Experiment::MlpRatio => "mlp-ratio",
        }
    }

    /// Default values of the numeric parameters the experiment reads.
    fn default_params(self) -> &'static [(&'static str, f64)] {
        match self {
            Experiment::FirstorderSlopes => &[("trials", 50.0), ("jacobian_trials", 100.0), ("fit_samples", 64.0)],
            Experiment::Theorem1Scan => &[("trials", 100.0), ("y_scale", 0.5)],
            Experiment::CollapseSim => &[
                ("trials", 20.0),
                ("steps", 50.0),
                ("lr", 1e-4),
                ("ratio", 0.05),
                ("gram_k", 8.0),
                ("containment_rank", 3.0),
            ],
            Experiment::OrthProjectionDemo => &[("trials", 100.0), ("b_rank", 2.0), ("adapter_rank", 4.0)],
            Experiment::BoundsScan => &[("trials", 1000.0), ("eps", -1.0), ("delta", -1.0)],
            Experiment::OracleFit => &[("trials", 20.0), ("scale", 1e-2), ("weight_scale", 0.5)],
            Experiment::Joint2d => &[
                ("gamma1", 0.3),
                ("gamma2", -0.7),
                ("steps", 20000.0),
                ("lr", 0.1),
                ("init_scale", 1e-2),
            ],
            Experiment::MlpRatio => &[("trials", 20.0), ("weight_scale", 1.0)],
        }
    }

    fn default_tolerances(self) -> &'static [(&'static str, f64)] {
        match self {
            Experiment::FirstorderSlopes => &[
                ("min_slope", 0.9),
                ("dwd_only_residual", 1e-12),
                ("jacobian_rel_err", 1e-6),
                ("postmlp_fit_residual", 0.05),
            ],
            Experiment::Theorem1Scan => &[("abs_gap", 1e-8)],
            Experiment::CollapseSim => &[("min_aligned", 0.99), ("max_orth", 0.05), ("containment", 1e-6)],
            Experiment::OrthProjectionDemo => &[("orthogonality", 1e-10), ("idempotence", 1e-12)],
            Experiment::BoundsScan => &[("slack", bounds::VIOLATION_SLACK)],
            Experiment::OracleFit => &[("max_residual", 0.05)],
            Experiment::Joint2d => &[("joint_mse", 1e-6), ("margin", 10.0)],
            Experiment::MlpRatio => &[("residual_identity", 1e-12)],
        }
    }
}

impl fmt::Display for Experiment {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Experiment {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Experiment::ALL
            .into_iter()
            .find(|e| e.as_str() == s)
            .ok_or_else(|| Error::UnknownExperiment(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_model: usize,
    pub d_mlp: usize,
    /// Positions per sequence.
    pub positions: usize,
    /// Samples (columns, sequences or data points, per experiment).
    pub samples: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            d_model: 8,
            d_mlp: 16,
            positions: 4,
            samples: 32,
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("steerkit-out")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub experiment: String,
    #[serde(default)]
    pub dims: Dims,
    #[serde(default)]
    pub seed: u64,
    /// Overrides of the experiment's named tolerances.
    #[serde(default)]
    pub tolerances: BTreeMap<String, f64>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    /// Overrides of the experiment's numeric parameters (trial counts, ε, …).
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl ExperimentConfig {
    pub fn new(experiment: Experiment, seed: u64) -> Self {
        Self {
            experiment: experiment.as_str().to_string(),
            dims: Dims::default(),
            seed,
            tolerances: BTreeMap::new(),
            output_dir: default_output_dir(),
            params: BTreeMap::new(),
        }
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn experiment(&self) -> Result<Experiment> {
        self.experiment.parse()
    }

    fn merged(
        &self,
        what: &str,
        defaults: &[(&'static str, f64)],
        given: &BTreeMap<String, f64>,
    ) -> Result<BTreeMap<String, f64>> {
        let mut out: BTreeMap<String, f64> = defaults.iter().map(|(k, v)| (k.to_string(), *v)).collect();
        for (k, v) in given {
            if !out.contains_key(k) {
                let known: Vec<&str> = defaults.iter().map(|(k, _)| *k).collect();
                return Err(Error::Config(format!(
                    "unknown {what} `{k}` for {} (known: {})",
                    self.experiment,
                    known.join(", ")
                )));
            }
            if !v.is_finite() {
                return Err(Error::Config(format!("{what} `{k}` must be finite")));
            }
            out.insert(k.clone(), *v);
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<Experiment> {
        let e = self.experiment()?;
        let d = self.dims;
        if e != Experiment::Joint2d {
            check_dims(d.d_model, d.d_mlp)?;
        }
        if d.positions == 0 || d.samples == 0 {
            return Err(Error::Config("positions and samples must be at least 1".into()));
        }
        self.merged("parameter", e.default_params(), &self.params)?;
        self.merged("tolerance", e.default_tolerances(), &self.tolerances)?;
        Ok(e)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub value: f64,
    /// `"<="` or `">="`.
    pub relation: String,
    pub threshold: f64,
}

impl Check {
    pub fn at_most(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: value <= threshold,
            value,
            relation: "<=".into(),
            threshold,
        }
    }

    pub fn at_least(name: &str, value: f64, threshold: f64) -> Self {
        Self {
            name: name.to_string(),
            passed: value >= threshold,
            value,
            relation: ">=".into(),
            threshold,
        }
    }
}

/// Column-labelled numeric table; missing values are `None`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Option<f64>>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Self {
            columns: columns.iter().map(|c| c.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        self.rows.push(row.into_iter().map(Some).collect());
    }

    pub fn push_opt(&mut self, row: Vec<Option<f64>>) {
        self.rows.push(row);
    }

    /// `k × k` matrix with columns `c0 … c{k−1}`.
    pub fn from_matrix(m: &DenseMatrix) -> Self {
        let mut t = Self {
            columns: (0..m.cols()).map(|j| format!("c{j}")).collect(),
            rows: Vec::new(),
        };
        for i in 0..m.rows() {
            t.push(m.row(i).to_vec());
        }
        t
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub schema: String,
    pub experiment: String,
    pub seed: u64,
    pub dims: Dims,
    pub params: BTreeMap<String, f64>,
    pub tolerances: BTreeMap<String, f64>,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub summary: BTreeMap<String, Value>,
    pub tables: BTreeMap<String, Table>,
    pub notes: Vec<String>,
}

impl Report {
    pub fn empty(experiment: &str, seed: u64, dims: Dims) -> Self {
        Self {
            schema: SCHEMA.to_string(),
            experiment: experiment.to_string(),
            seed,
            dims,
            params: BTreeMap::new(),
            tolerances: BTreeMap::new(),
            passed: true,
            checks: Vec::new(),
            summary: BTreeMap::new(),
            tables: BTreeMap::new(),
            notes: Vec::new(),
        }
    }

    fn check(&mut self, c: Check) {
        self.passed &= c.passed;
        self.checks.push(c);
    }

    fn note(&mut self, s: &str) {
        self.notes.push(s.to_string());
    }

    fn put(&mut self, key: &str, v: impl Serialize) {
        self.summary
            .insert(key.to_string(), serde_json::to_value(v).unwrap_or(Value::Null));
    }

    pub fn failed_checks(&self) -> Vec<&str> {
        self.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect()
    }
}

/// Writes `report.json` and one CSV per table into `dir`.
pub fn emit_report(report: &Report, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut files = Vec::new();
    let json_path = dir.join("report.json");
    let mut text = serde_json::to_string_pretty(report)?;
    text.push('\n');
    fs::write(&json_path, text)?;
    files.push(json_path);
    for (name, table) in &report.tables {
        let path = dir.join(format!("{name}.csv"));
        write_csv(table, &path)?;
        files.push(path);
    }
    Ok(files)
}

fn fmt_cell(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.16e}"),
        None => String::new(),
    }
}

fn write_csv(table: &Table, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "# schema: {SCHEMA}")?;
    let mut w = csv::Writer::from_writer(f);
    w.write_record(&table.columns)?;
    for row in &table.rows {
        w.write_record(row.iter().map(|&x| fmt_cell(x)))?;
    }
    w.flush()?;
    Ok(())
}

/// Result of a run: the report and the files written.
#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub report: Report,
    pub dir: PathBuf,
    pub files: Vec<PathBuf>,
}

/// Output directory for `cfg`, honouring [`OUT_ENV`].
pub fn output_root(cfg: &ExperimentConfig) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => cfg.output_dir.clone(),
    }
}

/// Runs the experiment and writes its report under `<root>/<experiment>/`.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutcome> {
    let report = execute(cfg)?;
    let dir = output_root(cfg).join(&report.experiment);
    let files = emit_report(&report, &dir)?;
    Ok(RunOutcome { report, dir, files })
}

/// Computes the report without touching the filesystem.
pub fn execute(cfg: &ExperimentConfig) -> Result<Report> {
    let e = cfg.validate()?;
    let params = cfg.merged("parameter", e.default_params(), &cfg.params)?;
    let tols = cfg.merged("tolerance", e.default_tolerances(), &cfg.tolerances)?;
    let mut report = Report::empty(e.as_str(), cfg.seed, cfg.dims);
    report.params = params.clone();
    report.tolerances = tols.clone();
    let ctx = Ctx {
        seed: cfg.seed,
        dims: cfg.dims,
        params,
        tols,
    };
    match e {
        Experiment::FirstorderSlopes => firstorder_slopes(&ctx, &mut report)?,
        Experiment::Theorem1Scan => theorem1_scan(&ctx, &mut report)?,
        Experiment::CollapseSim => collapse_sim(&ctx, &mut report)?,
        Experiment::OrthProjectionDemo => orth_projection_demo(&ctx, &mut report)?,
        Experiment::BoundsScan => bounds_scan(&ctx, &mut report)?,
        Experiment::OracleFit => oracle_fit(&ctx, &mut report)?,
        Experiment::Joint2d => joint_2d(&ctx, &mut report)?,
        Experiment::MlpRatio => mlp_ratio(&ctx, &mut report)?,
    }
    Ok(report)
}

struct Ctx {
    seed: u64,
    dims: Dims,
    params: BTreeMap<String, f64>,
    tols: BTreeMap<String, f64>,
}

impl Ctx {
    fn p(&self, k: &str) -> f64 {
        self.params[k]
    }

    fn count(&self, k: &str) -> Result<usize> {
        let v = self.params[k];
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Config(format!("`{k}` must be a non-negative integer, got {v}")));
        }
        Ok(v as usize)
    }

    fn tol(&self, k: &str) -> f64 {
        self.tols[k]
    }

    fn rng(&self, stream: u64) -> rng::SeededRng {
        rng::stream(self.seed, stream)
    }
}

fn fold_max(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(0.0, f64::max)
}

fn fold_min(xs: impl IntoIterator<Item = f64>) -> f64 {
    xs.into_iter().fold(f64::INFINITY, f64::min)
}

fn scaled_gaussian(rows: usize, cols: usize, fro: f64, rng: &mut rng::SeededRng) -> DenseMatrix {
    let m = rng::gaussian_matrix(rows, cols, 1.0, rng);
    let n = m.frobenius_norm();
    m.scale(fro / n)
}

fn random_sequences(d: usize, seqs: usize, positions: usize, rng: &mut rng::SeededRng) -> Vec<Vec<DenseVector>> {
    (0..seqs)
        .map(|_| (0..positions).map(|_| rng::gaussian_vector(d, 1.0, rng)).collect())
        .collect()
}

/// Largest `‖J − J_fd‖_F / ‖J‖_F` with central differences.
fn jacobian_fd_error(f: impl Fn(&[f64]) -> Result<DenseVector>, j: &DenseMatrix, h: &[f64]) -> Result<f64> {
    let fd = firstorder::fd_jacobian(f, h, trainer::FD_STEP)?;
    let jn = j.frobenius_norm();
    let diff = fd.sub(j)?.frobenius_norm();
    Ok(if jn > 0.0 { diff / jn } else { diff })
}

fn firstorder_slopes(ctx: &Ctx, report: &mut Report) -> Result<()> {
    let (d, k) = (ctx.dims.d_model, ctx.dims.d_mlp);
    let trials = ctx.count("trials")?;
    let mut table = Table::new(&[
        "trial",
        "steer_slope",
        "ft_slope",
        "dwd_only_max_residual",
        "mismatch_term_norm",
        "steer_res_1e-2",
        "steer_res_1e-4",
        "ft_res_1e-2",
        "ft_res_1e-4",
    ]);
    let mut min_steer = f64::INFINITY;
    let mut min_ft = f64::INFINITY;
    let mut worst_dwd: f64 = 0.0;
    for t in 0..trials {
        let mut r = ctx.rng(t as u64);
        let p = GluParams::random(d, k, Activation::Silu, 1.0, &mut r);
        let h = rng::gaussian_vector(d, 1.0, &mut r);
        let dh = vecops::scale(&rng::unit_vector(d, &mut r), 0.1);
        let dwg = scaled_gaussian(k, d, 0.1, &mut r);
        let dwu = scaled_gaussian(k, d, 0.1, &mut r);
        let dwd = scaled_gaussian(d, k, 0.1, &mut r);
        let rep = firstorder::steer_vs_ft_expansion(&p, &h, &dh, &dwg, &dwu, &dwd)?;
        let zero = DenseMatrix::zeros(k, d);
        let only = firstorder::steer_vs_ft_expansion(&p, &h, &dh, &zero, &zero, &dwd)?;
        let dwd_max = fold_max(only.ft_residual.iter().copied());
        // A residual of exactly zero means the expansion is exact, which
        // satisfies any slope requirement.
        min_steer = min_steer.min(rep.steer_slope.unwrap_or(f64::INFINITY));
        min_ft = min_ft.min(rep.ft_slope.unwrap_or(f64::INFINITY));
        worst_dwd = worst_dwd.max(dwd_max);
        table.push_opt(vec![
            Some(t as f64),
            rep.steer_slope,
            rep.ft_slope,
            Some(dwd_max),
            Some(rep.mismatch_term_norm),
            Some(rep.steer_residual[1]),
            Some(rep.steer_residual[3]),
            Some(rep.ft_residual[1]),
            Some(rep.ft_residual[3]),
        ]);
    }
    report.check(Check::at_least("steer_slope", min_steer, ctx.tol("min_slope")));
    report.check(Check::at_least("ft_slope", min_ft, ctx.tol("min_slope")));
    report.check(Check::at_most("dwd_only_ft_residual", worst_dwd, ctx.tol("dwd_only_residual")));
    report.tables.insert("slopes".into(), table);

    // Jacobians against central differences.
    let jt = ctx.count("jacobian_trials")?;
    let mut worst_j: f64 = 0.0;
    for t in 0..jt {
        let mut r = ctx.rng(1_000_000 + t as u64);
        let dd = 2 + t % 31;
        let kk = 2 + (3 * t) % 63;
        let phi = [Activation::Silu, Activation::Sigmoid][t % 2];
        let p = GluParams::random(dd, kk, phi, 1.0, &mut r);
        let h = rng::gaussian_vector(dd, 1.0, &mut r);
        let j = firstorder::glu_jacobian(&p, &h)?;
        worst_j = worst_j.max(jacobian_fd_error(|x| nanomodel::glu_forward(&p, x), &j, &h)?);
        let w1 = rng::gaussian_matrix(kk, dd, 1.0 / (dd as f64).sqrt(), &mut r);
        let w2 = rng::gaussian_matrix(dd, kk, 1.0 / (kk as f64).sqrt(), &mut r);
        let j = firstorder::mlp_jacobian(&w1, &w2, phi, &h)?;
        worst_j = worst_j.max(jacobian_fd_error(|x| firstorder::mlp_forward(&w1, &w2, phi, x), &j, &h)?);
    }
    report.check(Check::at_most("jacobian_fd", worst_j, ctx.tol("jacobian_rel_err")));

    // Post-MLP versus pre-MLP fits of a weight change.
    let n = ctx.count("fit_samples")?;
    let mut r = ctx.rng(2_000_000);
    let p = GluParams::random(d, k, Activation::Silu, 1.0, &mut r);
    let hs: Vec<DenseVector> = (0..n).map(|_| rng::gaussian_vector(d, 1.0, &mut r)).collect();
    let eps = 1e-3;
    let dwg = scaled_gaussian(k, d, eps, &mut r);
    let dwu = scaled_gaussian(k, d, eps, &mut r);
    let dwd = scaled_gaussian(d, k, eps, &mut r);
    let post = firstorder::ft_match_by_postmlp(&p, &dwg, &dwu, &dwd, &hs)?;
    report.check(Check::at_most("postmlp_fit_residual", post.residual, ctx.tol("postmlp_fit_residual")));

    let sq = GluParams::random(d, d, Activation::Silu, 1.0, &mut r);
    let zero = DenseMatrix::zeros(d, d);
    let dwd_sq = scaled_gaussian(d, d, eps, &mut r);
    let post_d = firstorder::ft_match_by_postmlp(&sq, &zero, &zero, &dwd_sq, &hs)?;
    let pre_d = firstorder::ft_match_by_premlp(&sq, &zero, &zero, &dwd_sq, &hs)?;
    report.check(Check::at_most(
        "dwd_only_postmlp_beats_premlp",
        post_d.residual - pre_d.residual,
        0.0,
    ));
    report.put("postmlp_fit", json!({
        "residual": post.residual,
        "residual_of_change": post.residual_of_change,
    }));
    report.put("dwd_only_fit", json!({
        "post_mlp_residual": post_d.residual,
        "pre_mlp_residual": pre_d.residual,
    }));
    report.put("min_steer_slope", min_steer);
    report.put("min_ft_slope", min_ft);
    report.put("max_jacobian_rel_err", worst_j);
    Ok(())
}

fn theorem1_scan(ctx: &Ctx, report: &mut Report) -> Result<()> {
    let (d, n) = (ctx.dims.d_model, ctx.dims.samples);
    let trials = ctx.count("trials")?;
    let y_scale = ctx.p("y_scale");
    let mut table = Table::new(&["trial", "predicted", "measured", "abs_gap", "canonical_predicted", "rank_xy"]);
    let mut worst: f64 = 0.0;
    let mut deficient = 0;
    for t in 0..trials {
        let mut r = ctx.rng(t as u64);
        let x = rng::gaussian_matrix(d, n, 1.0, &mut r);
        let y = rng::gaussian_matrix(d, n, y_scale, &mut r);
        let a_p = rng::gaussian_matrix(d, d, 1.0, &mut r);
        let rep = subspace::theorem1_error(&x, &y, &a_p)?;
        worst = worst.max(rep.abs_gap / rep.predicted_error.max(1.0));
        deficient += rep.rank_deficient as usize;
        table.push(vec![
            t as f64,
            rep.predicted_error,
            rep.measured_error,
            rep.abs_gap,
            rep.canonical_predicted_error,
            rep.rank_xy as f64,
        ]);
    }
    report.check(Check::at_most("theorem1_gap", worst, ctx.tol("abs_gap")));
    report.put("rank_deficient_trials", deficient);
    report.note("predicted uses the angle between each right singular vector of A_p X and the row space of X + Y");
    report.tables.insert("theorem1".into(), table);
    Ok(())
}

fn collapse_sim(ctx: &Ctx, report: &mut Report) -> Result<()> {
    let (d, p, n) = (ctx.dims.d_model, ctx.dims.d_model, ctx.dims.samples);
    let trials = ctx.count("trials")?;
    let base = CollapseConfig {
        steps: ctx.count("steps")?,
        lr: ctx.p("lr"),
        with_orth: false,
        orth_rank: 1,
        gram_k: ctx.count("gram_k")?,
    };
    let ratio = ctx.p("ratio");
    let mut table = Table::new(&[
        "trial",
        "top_cosine_no_orth",
        "top_cosine_orth",
        "diag_mass_no_orth",
        "diag_mass_orth",
        "offdiag_mass_no_orth",
        "offdiag_mass_orth",
    ]);
    let mut min_aligned = f64::INFINITY;
    let mut max_orth: f64 = 0.0;
    let mut diag_ordered = true;
    for t in 0..trials {
        let mut r = ctx.rng(t as u64);
        let inst = subspace::shared_direction_instance(d, p, n, ratio, &mut r)?;
        let off = subspace::simulate_collapse(&inst.x, &inst.f, &inst.w, &inst.g_target, &base)?;
        let on_cfg = CollapseConfig {
            with_orth: true,
            ..base.clone()
        };
        let on = subspace::simulate_collapse(&inst.x, &inst.f, &inst.w, &inst.g_target, &on_cfg)?;
        min_aligned = min_aligned.min(off.top_cosine);
        max_orth = max_orth.max(on.top_cosine);
        diag_ordered &= off.diag_mass > on.diag_mass;
        if t == 0 {
            report.tables.insert("gram_no_orth".into(), Table::from_matrix(&off.gram));
            report.tables.insert("gram_orth".into(), Table::from_matrix(&on.gram));
        }
        table.push(vec![
            t as f64,
            off.top_cosine,
            on.top_cosine,
            off.diag_mass,
            on.diag_mass,
            off.offdiag_mass,
            on.offdiag_mass,
        ]);
    }
    report.check(Check::at_least("aligned_without_orth", min_aligned, ctx.tol("min_aligned")));
    report.check(Check::at_most("separated_with_orth", max_orth, ctx.tol("max_orth")));
    report.check(Check::at_least("diag_mass_ordering", diag_ordered as u8 as f64, 1.0));
    report.tables.insert("collapse".into(), table);

    // Containment: all data inside a q-dimensional subspace Q.
    let q = ctx.count("containment_rank")?.clamp(1, d);
    let mut r = ctx.rng(1_000_000);
    let basis = rng::orthonormal_matrix(d, q, &mut r);
    let x = basis.matmul(&rng::gaussian_matrix(q, n, 1.0, &mut r))?;
    let f = basis.matmul(&rng::gaussian_matrix(q, n, 1.0, &mut r))?;
    let w = basis.matmul(&rng::gaussian_matrix(q, q, 1.0, &mut r))?.matmul_t(&basis)?;
    let g = x.add(&w.matmul(&f)?)?.add(&basis.matmul(&rng::gaussian_matrix(q, n, 0.05, &mut r))?)?;
    let contained = subspace::simulate_collapse(&x, &f, &w, &g, &base)?;
    let escape = contained.max_escape_h.max(contained.max_escape_w);
    report.check(Check::at_most("containment", escape, ctx.tol("containment")));
    report.put("min_top_cosine_no_orth", min_aligned);
    report.put("max_top_cosine_orth", max_orth);
    report.put("containment_escape", escape);
    Ok(())
}

fn orth_projection_demo(ctx: &Ctx, report: &mut Report) -> Result<()> {
    let d = ctx.dims.d_model;
    let trials = ctx.count("trials")?;
    let rb = ctx.count("b_rank")?.clamp(1, d);
    let ra = ctx.count("adapter_rank")?.max(1);
    let k = ctx.dims.d_mlp;
    let mut table = Table::new(&["trial", "defect", "norm_before", "norm_after", "retained_fraction"]);
    let mut worst_defect: f64 = 0.0;
    let mut worst_idem: f64 = 0.0;
    let mut worst_growth = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut r = ctx.rng(t as u64);
        let steer = SteeringAdapter::bottleneck(
            Locus::PostBlock,
            rng::gaussian_matrix(ra, d, 1.0, &mut r),
            rng::gaussian_matrix(d, ra, 1.0, &mut r),
            Activation::Identity,
        )?;
        let wupd = WeightUpdate::new(
            WeightTarget::Down,
            rng::gaussian_matrix(d, rb, 1.0, &mut r),
            rng::gaussian_matrix(rb, k, 1.0, &mut r),
        )?;
        let j = JointAdapter::new(steer, wupd, true)?;
        let once = project_orthogonal(&j)?;
        let twice = project_orthogonal(&once)?;
        let w_before = j.steer.output_factor().expect("bottleneck");
        let w_after = once.steer.output_factor().expect("bottleneck");
        let w_twice = twice.steer.output_factor().expect("bottleneck");
        let defect = once.orthogonality_defect();
        let (nb, na) = (w_before.frobenius_norm(), w_after.frobenius_norm());
        worst_defect = worst_defect.max(defect);
        worst_idem = worst_idem.max(w_twice.sub(&w_after)?.max_abs() / nb.max(1.0));
        worst_growth = worst_growth.max(na - nb);
        table.push(vec![t as f64, defect, nb, na, na / nb]);
    }
    report.check(Check::at_most("orthogonality", worst_defect, ctx.tol("orthogonality")));
    report.check(Check::at_most("idempotence", worst_idem, ctx.tol("idempotence")));
    report.check(Check::at_most("norm_not_increased", worst_growth, 0.0));
    report.tables.insert("projection".into(), table);
    Ok(())
}

fn bounds_scan(ctx: &Ctx, report: &mut Report) -> Result<()> {
    let trials = ctx.count("trials")?;
    let (eps, delta) = (ctx.p("eps"), ctx.p("delta"));
    let mut cfg = ScanConfig {
        trials,
        seed: ctx.seed,
        max_dim: ctx.dims.d_model.min(16),
        ..ScanConfig::default()
    };
    if eps >= 0.0 {
        cfg.eps_grid = vec![eps];
    }
    if delta >= 0.0 {
        cfg.delta_grid = vec![delta];
    }
    let mut table = Table::new(&[
        "lemma",
        "trials",
        "max_lhs",
        "max_lhs_over_rhs",
        "violations",
        "sub_bound_violations",
    ]);
    let slack = ctx.tol("slack");
    for (i, lemma) in Lemma::ALL.into_iter().enumerate() {
        let rep = bounds::scan(lemma, &cfg)?;
        report.check(Check::at_most(
            &format!("{lemma}_violations"),
            rep.violations as f64,
            0.0,
        ));
        report.check(Check::at_most(&format!("{lemma}_max_ratio"), rep.max_lhs_over_rhs, 1.0 + slack));
        table.push(vec![
            i as f64,
            rep.trials as f64,
            rep.max_lhs,
            rep.max_lhs_over_rhs,
            rep.violations as f64,
            rep.sub_bound_violations as f64,
        ]);
        report.put(lemma.as_str(), &rep);
    }
    report.note("lemma column: 0 layernorm, 1 linear, 2 glu_general, 3 glu_sigmoid, 4 attention");
    report.note("attention rhs is the larger of the proof's composite and the statement form with the softmax sub-bound; s is the minimum std over all positions");
    report.tables.insert("bounds".into(), table);
    Ok(())
}

fn oracle_fit(ctx: &Ctx, report: &mut Report) -> Result<()> {
    let Dims {
        d_model: d,
        d_mlp: k,
        positions,
        samples,
    } = ctx.dims;
    let trials = ctx.count("trials")?;
    let scale = ctx.p("scale");
    let ws = ctx.p("weight_scale");
    let opts = BlockOptions::default();
    let mut table = Table::new(&[
        "trial",
        "post_block_state",
        "post_mlp_state",
        "post_block_oracle",
        "post_mlp_oracle",
        "mean_shift_cosine",
    ]);
    let mut ordered = 0usize;
    let mut worst_block: f64 = 0.0;
    let mut worst_gap = f64::NEG_INFINITY;
    for t in 0..trials {
        let mut r = ctx.rng(t as u64);
        let glu = GluParams::random(d, k, Activation::Silu, ws, &mut r);
        let attn = AttnParams::random(d, ws, &mut r);
        let (glu_ft, attn_ft) = subspace::random_fine_tune(&glu, &attn, scale, &mut r)?;
        let seqs = random_sequences(d, samples, positions, &mut r);
        let fit = subspace::oracle_fit((&glu, &attn), (&glu_ft, &attn_ft), &seqs, opts)?;
        let (b, m) = (&fit.post_block, &fit.post_mlp);
        if b.rel_residual_state <= m.rel_residual_state {
            ordered += 1;
        }
        worst_block = worst_block.max(b.rel_residual_state);
        worst_gap = worst_gap.max(b.rel_residual_state - m.rel_residual_state);

        // Direction of the fitted post-MLP shift against the GLU weight shift.
        let mut cos_sum = 0.0;
        let mut cos_n = 0usize;
        for hs in &seqs {
            let tr = nanomodel::block_forward(&glu, &attn, hs, opts)?;
            for (y, x) in tr.post_attn.iter().zip(&tr.post_mlp) {
                let ws = subspace::weight_shift(&glu, &glu_ft, y)?;
                if let Ok(c) = subspace::shift_cosine(&m.m.matvec(x)?, &ws) {
                    cos_sum += c;
                    cos_n += 1;
                }
            }
        }
        let mean_cos = if cos_n > 0 { cos_sum / cos_n as f64 } else { 0.0 };
        table.push(vec![
            t as f64,
            b.rel_residual_state,
            m.rel_residual_state,
            b.rel_residual_oracle,
            m.rel_residual_oracle,
            mean_cos,
        ]);
    }
    report.check(Check::at_most("post_block_not_worse", worst_gap, 0.0));
    report.check(Check::at_most("post_block_residual", worst_block, ctx.tol("max_residual")));
    report.put("ordered_instances", ordered);
    report.note("residuals are ‖fit − δ‖ relative to the fine-tuned block output (state) and to the oracle itself (oracle)");
    report.tables.insert("oracle_fit".into(), table);
    Ok(())
}

fn joint_2d(ctx: &Ctx, report: &mut Report) -> Result<()> {
    let n = ctx.dims.samples;
    let gamma = (ctx.p("gamma1"), ctx.p("gamma2"));
    let mut r = ctx.rng(0);
    let xs: Vec<f64> = (0..n).map(|_| rng::uniform(-2.0, 2.0, &mut r)).collect();
    let floors = trainer::joint2d_floors(&xs, gamma)?;
    let init_scale = ctx.p("init_scale");
    let mut cfg = TrainConfig::new(
        ctx.p("lr"),
        ctx.count("steps")?,
        ObjectiveKind::TargetRegression,
        &[Trainable::Joint],
        ctx.seed,
    );
    cfg.loss_tol = 1e-14;
    let run = |train_h: bool, train_w: bool, stream: u64| -> Result<trainer::TrainResult> {
        let mut obj = trainer::joint2d_objective(&xs, gamma, train_h, train_w)?;
        let p0 = rng::gaussian_vector(obj.num_params(), init_scale, &mut ctx.rng(stream));
        obj.set_params(&p0)?;
        let mut c = cfg.clone();
        c.trainables = match (train_h, train_w) {
            (true, true) => [Trainable::Joint].into(),
            (true, false) => [Trainable::Steering].into(),
            _ => [Trainable::Weight].into(),
        };
        trainer::train(&c, &mut obj)
    };
    let joint = run(true, true, 1)?;
    let steer = run(true, false, 2)?;
    let ft = run(false, true, 3)?;
    // MSE is the mean squared error norm per sample, i.e. twice the loss.
    let mse = |l: f64| 2.0 * l;
    let (j, s, f) = (mse(joint.final_loss), mse(steer.final_loss), mse(ft.final_loss));
    let (sf, ff) = (mse(floors.steer_floor), mse(floors.ft_floor));
    report.check(Check::at_most("joint_mse", j, ctx.tol("joint_mse")));
    report.check(Check::at_least("steer_above_floor", s / sf, 1.0 - 1e-9));
    report.check(Check::at_least("ft_above_floor", f / ff, 1.0 - 1e-9));
    report.check(Check::at_least(
        "joint_margin",
        sf.min(ff) / j.max(f64::MIN_POSITIVE),
        ctx.tol("margin"),
    ));
    report.put("floors", json!({
        "alpha1": floors.alpha1,
        "beta1": floors.beta1,
        "steer_mse": sf,
        "ft_mse": ff,
    }));
    report.put("final_mse", json!({ "joint": j, "steer": s, "ft": f }));
    for (name, res) in [("joint", &joint), ("steer", &steer), ("ft", &ft)] {
        let mut t = Table::new(&["index", "loss"]);
        for (i, l) in res.loss_curve.iter().enumerate() {
            t.push(vec![i as f64, *l]);
        }
        report.tables.insert(format!("curve_{name}"), t);
        report.put(&format!("{name}_train"), json!({
            "steps_run": res.steps_run,
            "halvings": res.halvings,
            "grad_check_max_rel_err": res.grad_check_max_rel_err,
            "final_params": res.final_params,
        }));
    }
    report.note("all three runs start from the same small Gaussian initialization scale; exact zero is a saddle for the cross terms");
    Ok(())
}

fn mlp_ratio(ctx: &Ctx, report: &mut Report) -> Result<()> {
    let Dims {
        d_model: d,
        d_mlp: k,
        positions,
        samples,
    } = ctx.dims;
    let trials = ctx.count("trials")?;
    let ws = ctx.p("weight_scale");
    let mut table = Table::new(&["trial", "mean_ratio", "max_ratio", "min_ratio"]);
    let mut worst_identity: f64 = 0.0;
    let mut all = Vec::new();
    for t in 0..trials {
        let mut r = ctx.rng(t as u64);
        let glu = GluParams::random(d, k, Activation::Silu, ws, &mut r);
        let attn = AttnParams::random(d, ws, &mut r);
        let mut ratios = Vec::new();
        for hs in random_sequences(d, samples, positions, &mut r) {
            let tr = nanomodel::block_forward(&glu, &attn, &hs, BlockOptions::default())?;
            worst_identity = worst_identity.max(tr.residual_identity_defect());
            ratios.extend(nanomodel::mlp_block_ratio(&tr)?);
        }
        table.push(vec![
            t as f64,
            vecops::mean(&ratios),
            fold_max(ratios.iter().copied()),
            fold_min(ratios.iter().copied()),
        ]);
        all.extend(ratios);
    }
    report.check(Check::at_most("residual_identity", worst_identity, ctx.tol("residual_identity")));
    report.check(Check::at_least("ratios_non_negative", fold_min(all.iter().copied()), 0.0));
    report.put("mean_ratio", vecops::mean(&all));
    report.tables.insert("mlp_ratio".into(), table);
    Ok(())
}
