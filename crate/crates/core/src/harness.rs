//! Convergence experiments and rate regression.
//!
//! Spectral truncation errors are available in closed form when `x = y = 0`;
//! otherwise, and for finite elements, errors are Monte Carlo estimates over
//! paths that share one realization of the driving and observation noise
//! with a fine spectral reference. Studies run in `f64`.

use std::io::Write;

use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::bridge::{bridge_cov_mode, truncate_bridge, BridgeCoefficients, BridgeTarget};
use crate::error::{Error, Result};
use crate::fem::{assemble, FemBridge, FemCoupling, FemKernel, MODES_PER_DOF};
use crate::forward::{observation_noise, q_mode, DrivingNoise, ForwardKernel, PathEnsemble, TimeGrid};
use crate::model::{check_assumptions, CovarianceSpec, SpectralModel};
use crate::scalar::Real;

/// One point of a convergence curve.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LevelResult {
    /// Truncation level `N` or mesh width `h`.
    pub level: f64,
    pub error: f64,
    /// Zero for exact curves.
    pub stderr: f64,
    pub n_samples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConvergenceReport {
    pub levels: Vec<LevelResult>,
    pub slope: f64,
    pub slope_se: f64,
    pub metadata: Value,
}

impl ConvergenceReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// One row per level: `level,error,stderr,n_samples`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "level,error,stderr,n_samples")?;
        for l in &self.levels {
            writeln!(out, "{:.16e},{:.16e},{:.16e},{}", l.level, l.error, l.stderr, l.n_samples)?;
        }
        Ok(())
    }

    pub fn errors(&self) -> Vec<f64> {
        self.levels.iter().map(|l| l.error).collect()
    }
}

/// Ordinary least squares of `ln error` on `ln level`.
pub fn fit_rate(levels: Vec<LevelResult>, metadata: Value) -> Result<ConvergenceReport> {
    let n = levels.len();
    if n < 4 {
        return Err(Error::InvalidParameter(format!("rate fit needs at least 4 levels, got {n}")));
    }
    if let Some(bad) = levels.iter().find(|l| !(l.error > 0.0) || !l.error.is_finite()) {
        return Err(Error::InvalidParameter(format!("error {} at level {} is not positive", bad.error, bad.level)));
    }
    if levels.iter().any(|l| !(l.level > 0.0) || !l.level.is_finite()) {
        return Err(Error::InvalidParameter("levels must be positive".into()));
    }
    let increasing = levels.windows(2).all(|w| w[1].level > w[0].level);
    let decreasing = levels.windows(2).all(|w| w[1].level < w[0].level);
    if !increasing && !decreasing {
        return Err(Error::InvalidParameter("levels must be strictly monotone".into()));
    }
    let x: Vec<f64> = levels.iter().map(|l| l.level.ln()).collect();
    let y: Vec<f64> = levels.iter().map(|l| l.error.ln()).collect();
    let nf = n as f64;
    let mx = x.iter().sum::<f64>() / nf;
    let my = y.iter().sum::<f64>() / nf;
    let sxx: f64 = x.iter().map(|v| (v - mx) * (v - mx)).sum();
    let sxy: f64 = x.iter().zip(&y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ssr: f64 = x.iter().zip(&y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let slope_se = (ssr / (nf - 2.0) / sxx).sqrt();
    Ok(ConvergenceReport { levels, slope, slope_se, metadata })
}

/// Closed-form truncation error and the size of the neglected reference tail.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ExactError {
    /// `max_i (sum_{j=N+1}^{J} v_j(t_i))^{1/2}`.
    pub error: f64,
    /// Grid index attaining the maximum.
    pub argmax: usize,
    /// Upper bound on `sum_{j>J} mu_j / (2 lambda_j)`, the variance of every
    /// mode beyond the reference truncation; `None` for custom spectra.
    pub tail_bound: Option<f64>,
}

fn check_level<T: Real>(model: &SpectralModel<T>, n: usize) -> Result<()> {
    if n == 0 || n > model.modes() {
        return Err(Error::InvalidParameter(format!("truncation level {n} outside 1..={}", model.modes())));
    }
    Ok(())
}

/// Integral bound on the variance carried by modes beyond `J` for the
/// built-in noise families.
pub fn reference_tail_bound<T: Real>(model: &SpectralModel<T>) -> Option<f64> {
    let (cov, _) = model.families()?;
    let (s, scale) = match cov {
        CovarianceSpec::White => (0.0, 1.0),
        CovarianceSpec::Power { s, scale } => (s.as_f64(), scale.as_f64()),
    };
    // sum_{j>J} scale (pi j)^{-2(1+s)} / 2 <= int_J^inf of the same.
    let e = 2.0 * (1.0 + s);
    let j = model.modes() as f64;
    Some(scale * std::f64::consts::PI.powf(-e) * j.powf(1.0 - e) / (2.0 * (e - 1.0)))
}

fn max_tail<T: Real>(
    grid: &TimeGrid<T>,
    n: usize,
    modes: usize,
    var: impl Fn(usize, T) -> Result<T>,
) -> Result<(f64, usize)> {
    let mut best = (0.0f64, 0usize);
    for (i, &t) in grid.points().iter().enumerate() {
        // Smallest terms first.
        let mut acc = 0.0f64;
        for j in (n..modes).rev() {
            acc += var(j, t)?.as_f64();
        }
        let e = acc.max(0.0).sqrt();
        if e > best.0 {
            best = (e, i);
        }
    }
    Ok(best)
}

/// Exact sup-in-time L2 error of the `N`-mode truncation of the bridge
/// against the `J`-mode model, for `x = y = 0`.
pub fn exact_spectral_error<T: Real>(
    model: &SpectralModel<T>,
    target: &BridgeTarget<T>,
    n: usize,
    grid: &TimeGrid<T>,
) -> Result<ExactError> {
    check_level(model, n)?;
    grid.check_horizon(model.horizon())?;
    if !target.is_zero() {
        return Err(Error::InvalidParameter("the exact error curve requires x = 0 and y = 0".into()));
    }
    let (error, argmax) = max_tail(grid, n, model.modes(), |j, t| bridge_cov_mode(j, t, t, model))?;
    Ok(ExactError { error, argmax, tail_bound: reference_tail_bound(model) })
}

/// Exact error of the truncated unconditioned process started at zero.
pub fn exact_forward_error<T: Real>(model: &SpectralModel<T>, n: usize, grid: &TimeGrid<T>) -> Result<ExactError> {
    check_level(model, n)?;
    grid.check_horizon(model.horizon())?;
    let (error, argmax) = max_tail(grid, n, model.modes(), |j, t| Ok(q_mode(j, t, model)))?;
    Ok(ExactError { error, argmax, tail_bound: reference_tail_bound(model) })
}

/// Norm of the pathwise error in Monte Carlo estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ErrorNorm {
    /// `(E sup_i |Delta(t_i)|^p)^{1/p}`.
    SupPath,
    /// `max_i (E |Delta(t_i)|^p)^{1/p}`, comparable with the exact curves.
    Pointwise,
}

impl ErrorNorm {
    fn other(self) -> Self {
        match self {
            ErrorNorm::SupPath => ErrorNorm::Pointwise,
            ErrorNorm::Pointwise => ErrorNorm::SupPath,
        }
    }
}

/// Monte Carlo estimate with its delete-one jackknife standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McError {
    pub error: f64,
    pub stderr: f64,
}

/// Squared distances `|Delta_s(t_i)|^2`, `samples x points`, row major.
#[derive(Debug, Clone)]
pub struct SquaredDistances {
    points: usize,
    values: Vec<f64>,
}

impl SquaredDistances {
    pub fn new(points: usize, values: Vec<f64>) -> Self {
        assert!(points > 0 && values.len().is_multiple_of(points), "ragged distance table");
        Self { points, values }
    }

    pub fn n_samples(&self) -> usize {
        self.values.len() / self.points
    }

    fn row(&self, s: usize) -> &[f64] {
        &self.values[s * self.points..(s + 1) * self.points]
    }

    /// Estimate of the `p`-th moment norm with a jackknife standard error.
    pub fn estimate(&self, p: f64, norm: ErrorNorm) -> Result<McError> {
        if !(p >= 1.0) || !p.is_finite() {
            return Err(Error::InvalidParameter(format!("moment order p must be >= 1, got {p}")));
        }
        let n = self.n_samples();
        if n < 2 {
            return Err(Error::InvalidParameter("at least two samples are needed".into()));
        }
        let half = p / 2.0;
        let nf = n as f64;
        match norm {
            ErrorNorm::SupPath => {
                let v: Vec<f64> =
                    (0..n).map(|s| self.row(s).iter().fold(0.0f64, |a, &b| a.max(b)).powf(half)).collect();
                let total: f64 = v.iter().sum();
                let error = (total / nf).powf(1.0 / p);
                let leave: Vec<f64> = v.iter().map(|x| ((total - x) / (nf - 1.0)).max(0.0).powf(1.0 / p)).collect();
                Ok(McError { error, stderr: jackknife_se(&leave) })
            }
            ErrorNorm::Pointwise => {
                let m = self.points;
                let mut totals = vec![0.0f64; m];
                for s in 0..n {
                    for (t, &d) in totals.iter_mut().zip(self.row(s)) {
                        *t += d.powf(half);
                    }
                }
                let error = totals.iter().fold(0.0f64, |a, &t| a.max(t / nf)).powf(1.0 / p);
                let leave: Vec<f64> = (0..n)
                    .map(|s| {
                        totals
                            .iter()
                            .zip(self.row(s))
                            .fold(0.0f64, |a, (&t, &d)| a.max((t - d.powf(half)) / (nf - 1.0)))
                            .max(0.0)
                            .powf(1.0 / p)
                    })
                    .collect();
                Ok(McError { error, stderr: jackknife_se(&leave) })
            }
        }
    }
}

fn jackknife_se(leave: &[f64]) -> f64 {
    let n = leave.len() as f64;
    let mean = leave.iter().sum::<f64>() / n;
    let ss: f64 = leave.iter().map(|v| (v - mean) * (v - mean)).sum();
    ((n - 1.0) / n * ss).sqrt()
}

/// `(E sup_i |A(t_i) - B(t_i)|^p)^{1/p}` over paired samples of two spectral
/// ensembles. Missing coefficients of the narrower ensemble count as zero.
pub fn mc_sup_error<T: Real>(a: &PathEnsemble<T>, b: &PathEnsemble<T>, p: f64) -> Result<McError> {
    ensemble_distances(a, b)?.estimate(p, ErrorNorm::SupPath)
}

/// `max_i (E |A(t_i) - B(t_i)|^p)^{1/p}` over paired samples.
pub fn mc_pointwise_error<T: Real>(a: &PathEnsemble<T>, b: &PathEnsemble<T>, p: f64) -> Result<McError> {
    ensemble_distances(a, b)?.estimate(p, ErrorNorm::Pointwise)
}

/// Pairwise squared distances between two ensembles in the same frame.
pub fn ensemble_distances<T: Real>(a: &PathEnsemble<T>, b: &PathEnsemble<T>) -> Result<SquaredDistances> {
    if a.grid() != b.grid() {
        return Err(Error::InvalidGrid("ensembles live on different grids".into()));
    }
    if a.n_samples() != b.n_samples() {
        return Err(Error::DimensionMismatch { what: "sample count", expected: a.n_samples(), got: b.n_samples() });
    }
    if a.frame() != b.frame() {
        return Err(Error::InvalidParameter("ensembles use different coefficient frames".into()));
    }
    if a.seed() != b.seed() {
        return Err(Error::InvalidParameter("ensembles were not drawn with a common seed".into()));
    }
    let m = a.grid().len();
    let width = a.width().max(b.width());
    let mut values = Vec::with_capacity(a.n_samples() * m);
    for s in 0..a.n_samples() {
        for i in 0..m {
            let mut acc = 0.0f64;
            for k in 0..width {
                let va = if k < a.width() { a.get(s, i, k).as_f64() } else { 0.0 };
                let vb = if k < b.width() { b.get(s, i, k).as_f64() } else { 0.0 };
                acc += (va - vb) * (va - vb);
            }
            values.push(acc);
        }
    }
    Ok(SquaredDistances::new(m, values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyMode {
    Exact,
    MonteCarlo,
}

/// Truncation study of the spectral bridge (or, with `unconditioned`, of the
/// forward process) against the full model.
#[derive(Debug, Clone)]
pub struct SpectralStudy {
    pub model: SpectralModel<f64>,
    pub target: BridgeTarget<f64>,
    pub levels: Vec<usize>,
    pub grid: TimeGrid<f64>,
    pub mode: StudyMode,
    pub unconditioned: bool,
    pub n_samples: usize,
    pub p: f64,
    pub norm: ErrorNorm,
    pub seed: u64,
}

impl SpectralStudy {
    /// Exact curve of the bridge with `x = y = 0` on a uniform grid.
    pub fn exact(model: SpectralModel<f64>, levels: Vec<usize>, grid_points: usize) -> Result<Self> {
        let grid = TimeGrid::uniform(grid_points, model.horizon())?;
        let modes = model.modes();
        Ok(Self {
            model,
            target: BridgeTarget::zero(modes),
            levels,
            grid,
            mode: StudyMode::Exact,
            unconditioned: false,
            n_samples: 0,
            p: 2.0,
            norm: ErrorNorm::Pointwise,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.model.modes();
        if self.levels.is_empty() {
            return Err(Error::InvalidParameter("empty truncation ladder".into()));
        }
        if !self.levels.windows(2).all(|w| w[1] > w[0]) {
            return Err(Error::InvalidParameter("truncation levels must be strictly increasing".into()));
        }
        let max = *self.levels.last().expect("nonempty");
        if self.levels[0] == 0 || max >= j {
            return Err(Error::InvalidParameter(format!("truncation levels must lie in [1, {j})")));
        }
        if j < MODES_PER_DOF * max {
            return Err(Error::InvalidParameter(format!(
                "reference truncation J = {j} below {MODES_PER_DOF} x max level = {}",
                MODES_PER_DOF * max
            )));
        }
        if self.target.x.len() != j || self.target.y.len() != j {
            return Err(Error::DimensionMismatch { what: "bridge target", expected: j, got: self.target.x.len() });
        }
        self.grid.check_horizon(self.model.horizon())?;
        match self.mode {
            StudyMode::Exact => {
                if !self.target.is_zero() {
                    return Err(Error::InvalidParameter("exact curves require x = 0 and y = 0".into()));
                }
            }
            StudyMode::MonteCarlo => {
                if self.n_samples < 2 {
                    return Err(Error::InvalidParameter("Monte Carlo studies need at least two samples".into()));
                }
                if !(self.p >= 1.0) {
                    return Err(Error::InvalidParameter(format!("moment order p must be >= 1, got {}", self.p)));
                }
            }
        }
        Ok(())
    }

    fn metadata(&self, extra: Value) -> Value {
        let budget = check_assumptions(&self.model, self.target.chi);
        let mut meta = json!({
            "study": "spectral",
            "mode": self.mode,
            "unconditioned": self.unconditioned,
            "modes": self.model.modes(),
            "horizon": self.model.horizon(),
            "eta": self.model.eta(),
            "grid_points": self.grid.len(),
            "n_samples": self.n_samples,
            "p": self.p,
            "norm": self.norm,
            "seed": self.seed,
            "reference_tail_bound": reference_tail_bound(&self.model),
            "regularity": budget,
            "warnings": budget.diagnostics,
        });
        merge(&mut meta, extra);
        meta
    }
}

/// Spectral convergence curve.
pub fn run_spectral_study(study: &SpectralStudy) -> Result<ConvergenceReport> {
    study.validate()?;
    match study.mode {
        StudyMode::Exact => {
            let levels = study
                .levels
                .iter()
                .map(|&n| {
                    let e = if study.unconditioned {
                        exact_forward_error(&study.model, n, &study.grid)?
                    } else {
                        exact_spectral_error(&study.model, &study.target, n, &study.grid)?
                    };
                    Ok(LevelResult { level: n as f64, error: e.error, stderr: 0.0, n_samples: 0 })
                })
                .collect::<Result<Vec<_>>>()?;
            fit_rate(levels, study.metadata(json!({})))
        }
        StudyMode::MonteCarlo => {
            let tables = spectral_distances(study)?;
            let (levels, alternate) =
                summarize(&study.levels.iter().map(|&n| n as f64).collect::<Vec<_>>(), &tables, study)?;
            fit_rate(levels, study.metadata(json!({ "alternate": alternate })))
        }
    }
}

fn summarize(
    levels: &[f64],
    tables: &[SquaredDistances],
    study: &impl NormChoice,
) -> Result<(Vec<LevelResult>, Value)> {
    let (p, norm) = study.norm_choice();
    let mut primary = Vec::with_capacity(levels.len());
    let mut other = Vec::with_capacity(levels.len());
    for (&level, table) in levels.iter().zip(tables) {
        let a = table.estimate(p, norm)?;
        let b = table.estimate(p, norm.other())?;
        primary.push(LevelResult { level, error: a.error, stderr: a.stderr, n_samples: table.n_samples() });
        other.push(LevelResult { level, error: b.error, stderr: b.stderr, n_samples: table.n_samples() });
    }
    let slope = fit_rate(other.clone(), Value::Null).map(|r| r.slope).ok();
    let alternate = json!({ "norm": norm.other(), "levels": other, "slope": slope });
    Ok((primary, alternate))
}

trait NormChoice {
    fn norm_choice(&self) -> (f64, ErrorNorm);
}

impl NormChoice for SpectralStudy {
    fn norm_choice(&self) -> (f64, ErrorNorm) {
        (self.p, self.norm)
    }
}

fn merge(base: &mut Value, extra: Value) {
    if let (Value::Object(b), Value::Object(e)) = (base, extra) {
        b.extend(e);
    }
}

/// Per level, squared distances between the truncated and the full sample
/// paths, all driven by the same noise.
fn spectral_distances(study: &SpectralStudy) -> Result<Vec<SquaredDistances>> {
    let model = &study.model;
    let grid = &study.grid;
    let j = model.modes();
    let m = grid.len();
    let full_kernel = ForwardKernel::new(model, grid);
    let full_coeffs = if study.unconditioned { None } else { Some(BridgeCoefficients::new(model, grid)?) };
    let mut levels = Vec::with_capacity(study.levels.len());
    for &n in &study.levels {
        let sub = truncate_bridge(model, n)?;
        let coeffs = if study.unconditioned { None } else { Some(BridgeCoefficients::new(&sub, grid)?) };
        levels.push((n, ForwardKernel::new(&sub, grid), coeffs, study.target.truncate(n)));
    }
    let per_sample: Vec<Vec<f64>> = (0..study.n_samples)
        .into_par_iter()
        .map(|s| {
            let s = s as u64;
            let noise = DrivingNoise::draw(study.seed, s, j, m - 1);
            let mut full = vec![0.0; m * j];
            full_kernel.fill_path_from(&study.target.x, &noise, &mut full);
            let z = observation_noise(model.mu_tilde(), study.seed, s);
            if let Some(c) = &full_coeffs {
                c.condition_path(&mut full, &z, &study.target.y);
            }
            // Suffix sums of squared reference coefficients per time point.
            let mut out = Vec::with_capacity(levels.len() * m);
            let mut part = Vec::new();
            for (n, kernel, coeffs, target) in &levels {
                part.clear();
                part.resize(m * n, 0.0);
                kernel.fill_path_from(&target.x, &noise, &mut part);
                if let Some(c) = coeffs {
                    c.condition_path(&mut part, &z[..*n], &target.y);
                }
                for i in 0..m {
                    let row = &full[i * j..(i + 1) * j];
                    let mut acc = 0.0;
                    for v in row[*n..].iter().rev() {
                        acc += v * v;
                    }
                    for (a, b) in part[i * n..(i + 1) * n].iter().zip(row) {
                        acc += (a - b) * (a - b);
                    }
                    out.push(acc);
                }
            }
            out
        })
        .collect();
    Ok(split_levels(per_sample, study.levels.len(), m))
}

fn split_levels(per_sample: Vec<Vec<f64>>, n_levels: usize, m: usize) -> Vec<SquaredDistances> {
    (0..n_levels)
        .map(|l| {
            let mut values = Vec::with_capacity(per_sample.len() * m);
            for row in &per_sample {
                values.extend_from_slice(&row[l * m..(l + 1) * m]);
            }
            SquaredDistances::new(m, values)
        })
        .collect()
}

/// Finite element study against the spectral reference `model`.
#[derive(Debug, Clone)]
pub struct FemStudy {
    /// Reference with Dirichlet eigenvalues; for bridges its observation
    /// spectrum must equal `eps` on every mode.
    pub model: SpectralModel<f64>,
    pub target: BridgeTarget<f64>,
    /// Mesh widths, each with integral `1/h`.
    pub levels: Vec<f64>,
    pub grid: TimeGrid<f64>,
    pub eps: f64,
    pub forward_only: bool,
    pub n_samples: usize,
    pub p: f64,
    pub norm: ErrorNorm,
    pub seed: u64,
}

impl NormChoice for FemStudy {
    fn norm_choice(&self) -> (f64, ErrorNorm) {
        (self.p, self.norm)
    }
}

impl FemStudy {
    pub fn validate(&self) -> Result<()> {
        let j = self.model.modes();
        if self.levels.is_empty() {
            return Err(Error::InvalidParameter("empty mesh ladder".into()));
        }
        if !self.levels.windows(2).all(|w| w[1] < w[0]) {
            return Err(Error::InvalidParameter("mesh widths must be strictly decreasing".into()));
        }
        for &h in &self.levels {
            let sys = crate::fem::FemMesh::uniform(h)?;
            if j < MODES_PER_DOF * sys.n_dof() {
                return Err(Error::InvalidParameter(format!(
                    "reference truncation J = {j} below {MODES_PER_DOF} x n_dof = {} at h = {h}",
                    MODES_PER_DOF * sys.n_dof()
                )));
            }
        }
        if self.target.x.len() != j || self.target.y.len() != j {
            return Err(Error::DimensionMismatch { what: "bridge target", expected: j, got: self.target.x.len() });
        }
        if self.n_samples < 2 {
            return Err(Error::InvalidParameter("Monte Carlo studies need at least two samples".into()));
        }
        if !(self.p >= 1.0) {
            return Err(Error::InvalidParameter(format!("moment order p must be >= 1, got {}", self.p)));
        }
        if !self.forward_only {
            if !(self.eps > 0.0) || !self.eps.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "observation scale eps must be positive, got {}",
                    self.eps
                )));
            }
            if self.model.mu_tilde().iter().any(|&m| (m - self.eps).abs() > 1e-12 * self.eps) {
                return Err(Error::InvalidParameter(
                    "finite element bridges observe through eps I; the reference observation spectrum must equal eps"
                        .into(),
                ));
            }
        }
        self.grid.check_horizon(self.model.horizon())
    }
}

/// Finite element convergence curve in the mesh width.
pub fn run_fem_study(study: &FemStudy) -> Result<ConvergenceReport> {
    study.validate()?;
    let model = &study.model;
    let grid = &study.grid;
    let j = model.modes();
    let m = grid.len();
    let steps = m - 1;
    let ref_kernel = ForwardKernel::new(model, grid);
    let ref_coeffs = if study.forward_only { None } else { Some(BridgeCoefficients::new(model, grid)?) };
    struct Level {
        n: usize,
        coupling: FemCoupling<f64>,
        kernel: FemKernel<f64>,
        bridge: Option<FemBridge<f64>>,
        d0: Vec<f64>,
        wy: nalgebra::DVector<f64>,
    }
    let mut levels = Vec::with_capacity(study.levels.len());
    for &h in &study.levels {
        let sys = assemble(h)?;
        let coupling = FemCoupling::new(&sys, j)?;
        let kernel = FemKernel::new(&sys, &coupling, model, grid)?;
        let bridge =
            if study.forward_only { None } else { Some(FemBridge::new(&sys, &coupling, model, study.eps, grid)?) };
        let d0 = coupling.project(&study.target.x).iter().copied().collect();
        let wy = coupling.project(&study.target.y);
        levels.push(Level { n: sys.n_dof(), coupling, kernel, bridge, d0, wy });
    }
    let per_sample: Vec<Vec<f64>> = (0..study.n_samples)
        .into_par_iter()
        .map(|s| {
            let s = s as u64;
            let noise = DrivingNoise::draw(study.seed, s, j, steps);
            let mut reference = vec![0.0; m * j];
            ref_kernel.fill_path_from(&study.target.x, &noise, &mut reference);
            let z = observation_noise(model.mu_tilde(), study.seed, s);
            if let Some(c) = &ref_coeffs {
                c.condition_path(&mut reference, &z, &study.target.y);
            }
            let mut out = Vec::with_capacity(levels.len() * m);
            for lv in &levels {
                let mut modal = vec![0.0; m * lv.n];
                lv.kernel.fill_modal(&lv.d0, &noise, study.seed, s, &mut modal);
                if let Some(b) = &lv.bridge {
                    let zeta = b.observation_noise(&lv.coupling, &z, study.seed, s);
                    b.condition_modal(&mut modal, &zeta, &lv.wy);
                }
                for i in 0..m {
                    out.push(
                        lv.coupling.l2_distance_sq(&reference[i * j..(i + 1) * j], &modal[i * lv.n..(i + 1) * lv.n]),
                    );
                }
            }
            out
        })
        .collect();
    let tables = split_levels(per_sample, levels.len(), m);
    let (results, alternate) = summarize(&study.levels, &tables, study)?;
    let budget = check_assumptions(model, study.target.chi);
    let meta = json!({
        "study": "fem",
        "forward_only": study.forward_only,
        "eps": study.eps,
        "modes": j,
        "horizon": model.horizon(),
        "grid_points": m,
        "n_samples": study.n_samples,
        "p": study.p,
        "norm": study.norm,
        "seed": study.seed,
        "reference_tail_bound": reference_tail_bound(model),
        "regularity": budget,
        "warnings": budget.diagnostics,
        "alternate": alternate,
    });
    fit_rate(results, meta)
}
