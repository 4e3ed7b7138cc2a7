//! Brute-force reference computations.
//!
//! Nothing in here is used by the samplers. Dense Gaussian conditioning via
//! Schur complements checks the closed-form bridge gains, the pseudoinverse
//! utilities check range inclusion and the associated norm inequality, and an
//! adaptive Gauss-Kronrod rule checks the covariance integrals.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen, SVD};
use serde::Serialize;

use crate::bridge::{bridge_cov_mode, bridge_mean, BridgeTarget};
use crate::error::{Error, Result};
use crate::forward::{cov_mode, q_mode, TimeGrid};
use crate::model::{Extended, SpectralModel};
use crate::rng;
use crate::scalar::Real;

/// Relative singular value cutoff for numerical kernels.
pub const SVD_CUTOFF: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoordKind {
    State,
    Observation,
}

/// What a coordinate of a [`JointGaussian`] represents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Label<T> {
    pub kind: CoordKind,
    pub time: T,
    /// Mode (spectral) or node / discrete mode (finite elements), zero based.
    pub index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct JointGaussian<T: Real> {
    pub mean: DVector<T>,
    pub cov: DMatrix<T>,
    pub labels: Vec<Label<T>>,
}

impl<T: Real> JointGaussian<T> {
    pub fn new(mean: DVector<T>, cov: DMatrix<T>, labels: Vec<Label<T>>) -> Result<Self> {
        let n = mean.len();
        if cov.shape() != (n, n) {
            return Err(Error::DimensionMismatch { what: "covariance", expected: n, got: cov.nrows() });
        }
        if labels.len() != n {
            return Err(Error::DimensionMismatch { what: "labels", expected: n, got: labels.len() });
        }
        let scale = cov.amax().max(T::tiny());
        if (&cov - cov.transpose()).amax() > T::lit(1e-12) * scale {
            return Err(Error::Numerical("covariance is not symmetric".into()));
        }
        if n > 0 {
            let ev = SymmetricEigen::new(cov.clone()).eigenvalues;
            let trace = cov.trace();
            if ev.min() < -T::lit(1e-10) * trace.abs() {
                return Err(Error::Numerical(format!(
                    "covariance is not positive semidefinite (eigenvalue {})",
                    ev.min()
                )));
            }
        }
        Ok(Self { mean, cov, labels })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn position(&self, kind: CoordKind, time: T, index: usize) -> Option<usize> {
        self.labels.iter().position(|l| l.kind == kind && l.index == index && l.time == time)
    }
}

/// Joint law of the mode coefficients `c_j(t_i)` and observations
/// `c_j(T) + z_j` for the listed modes. Per mode the block is ordered as the
/// grid states followed by the observation; blocks of different modes are
/// uncorrelated.
pub fn assemble_joint<T: Real>(
    model: &SpectralModel<T>,
    grid: &TimeGrid<T>,
    modes: &[usize],
    x: &[T],
) -> Result<JointGaussian<T>> {
    grid.check_horizon(model.horizon())?;
    if x.len() != model.modes() {
        return Err(Error::DimensionMismatch { what: "initial value", expected: model.modes(), got: x.len() });
    }
    let m = grid.len();
    let block = m + 1;
    let n = modes.len() * block;
    let end = model.horizon();
    let mut mean = DVector::zeros(n);
    let mut cov = DMatrix::zeros(n, n);
    let mut labels = Vec::with_capacity(n);
    for (b, &j) in modes.iter().enumerate() {
        let o = b * block;
        let l = model.lambda()[j];
        for (a, &t) in grid.points().iter().enumerate() {
            mean[o + a] = (-(l * t)).exp() * x[j];
            labels.push(Label { kind: CoordKind::State, time: t, index: j });
            for (c, &s) in grid.points().iter().enumerate() {
                cov[(o + a, o + c)] = cov_mode(j, t, s, model);
            }
            let cross = cov_mode(j, t, end, model);
            cov[(o + a, o + m)] = cross;
            cov[(o + m, o + a)] = cross;
        }
        mean[o + m] = (-(l * end)).exp() * x[j];
        cov[(o + m, o + m)] = cov_mode(j, end, end, model) + model.mu_tilde()[j];
        labels.push(Label { kind: CoordKind::Observation, time: end, index: j });
    }
    JointGaussian::new(mean, cov, labels)
}

/// Conditions on `x_O = values` by Schur complement. The result keeps every
/// coordinate; observed ones become deterministic.
pub fn condition<T: Real>(joint: &JointGaussian<T>, observed: &[usize], values: &[T]) -> Result<JointGaussian<T>> {
    if observed.len() != values.len() {
        return Err(Error::DimensionMismatch { what: "observed values", expected: observed.len(), got: values.len() });
    }
    if observed.is_empty() {
        return Ok(joint.clone());
    }
    let n = joint.dim();
    if let Some(&bad) = observed.iter().find(|&&i| i >= n) {
        return Err(Error::InvalidParameter(format!("observed index {bad} out of range")));
    }
    let oo = joint.cov.select_rows(observed).select_columns(observed);
    let trace = oo.trace();
    let smallest = SymmetricEigen::new(oo.clone()).eigenvalues.min();
    if !(smallest > T::lit(1e-12) * trace) {
        return Err(Error::SingularObservation { smallest: smallest.as_f64(), trace: trace.as_f64() });
    }
    let chol = Cholesky::new(oo).ok_or_else(|| Error::Numerical("Cholesky of observed block failed".into()))?;
    let so = joint.cov.select_columns(observed);
    let innovation =
        DVector::from_iterator(observed.len(), observed.iter().zip(values).map(|(&i, &v)| v - joint.mean[i]));
    let mean = &joint.mean + &so * chol.solve(&innovation);
    let gain_t = chol.solve(&so.transpose());
    let mut cov = &joint.cov - &so * gain_t;
    for &i in observed {
        cov.row_mut(i).fill(T::zero());
        cov.column_mut(i).fill(T::zero());
    }
    let mut mean = mean;
    for (&i, &v) in observed.iter().zip(values) {
        mean[i] = v;
    }
    cov = (&cov + cov.transpose()) * T::lit(0.5);
    Ok(JointGaussian { mean, cov, labels: joint.labels.clone() })
}

/// Moore-Penrose pseudoinverse via SVD, dropping singular values below
/// `SVD_CUTOFF * sigma_max`.
pub fn pseudoinverse<T: Real>(a: &DMatrix<T>) -> DMatrix<T> {
    let (m, n) = a.shape();
    if m == 0 || n == 0 {
        return DMatrix::zeros(n, m);
    }
    let svd = SVD::new(a.clone(), true, true);
    let u = svd.u.as_ref().expect("left singular vectors");
    let vt = svd.v_t.as_ref().expect("right singular vectors");
    let smax = svd.singular_values.max();
    let cut = T::lit(SVD_CUTOFF) * smax;
    let mut out = DMatrix::zeros(n, m);
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s > cut && s > T::zero() {
            out += vt.row(k).transpose() * u.column(k).transpose() / s;
        }
    }
    out
}

/// Numerical rank under the same cutoff as [`pseudoinverse`].
pub fn rank<T: Real>(a: &DMatrix<T>) -> usize {
    if a.is_empty() {
        return 0;
    }
    let sv = SVD::new(a.clone(), false, false).singular_values;
    let cut = T::lit(SVD_CUTOFF) * sv.max();
    sv.iter().filter(|&&s| s > cut && s > T::zero()).count()
}

/// Outcome of [`check_range_domination`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RangeReport {
    /// `range(A1)` contained in `range(A2)`.
    pub included: bool,
    /// Largest ratio `|A1^T u| / |A2^T u|` over the probes; infinite when a
    /// probe in `ker(A2^T)` has `A1^T u != 0`.
    pub c_est: Extended,
    /// Same maximum over the random probes only.
    pub c_random: f64,
    /// Worst relative residual of `min_w |A2 w - A1 v|` over the probes.
    pub max_residual: f64,
    pub witnessed_unbounded: bool,
    /// Largest `|A2^+ u| / (C |A1^+ u|)` over `u` in `range(A1)`; at most one
    /// (up to rounding) when the inverse bound holds.
    pub inverse_ratio: Option<f64>,
    pub inverse_bound_holds: Option<bool>,
}

fn probe_vector<T: Real>(len: usize, seed: u64, trial: u64, tag: u64) -> DVector<T> {
    let mut stream = rng::substream(seed, rng::STREAM_PROBE, trial, tag);
    DVector::from_iterator(len, (0..len).map(|_| T::lit(rng::standard_normal(&mut stream))))
}

/// Tests `|A1^T u| <= C |A2^T u|` for all `u` by random probes, together with
/// the equivalent statement: `range(A1) ⊂ range(A2)` and
/// `|A2^+ u| <= C |A1^+ u|` on `range(A1)`.
pub fn check_range_domination<T: Real>(
    a1: &DMatrix<T>,
    a2: &DMatrix<T>,
    trials: usize,
    seed: u64,
) -> Result<RangeReport> {
    let m = a1.nrows();
    if a2.nrows() != m {
        return Err(Error::DimensionMismatch { what: "codomain of A2", expected: m, got: a2.nrows() });
    }
    let p1 = pseudoinverse(a1);
    let p2 = pseudoinverse(a2);
    let n1 = a1.ncols();
    let scale1 = a1.amax().max(T::tiny());
    let scale2 = a2.amax().max(T::tiny());
    let tol = T::lit(1e-8);

    // Range inclusion by least-squares residuals.
    let mut max_residual = T::zero();
    for k in 0..trials {
        let v = probe_vector::<T>(n1, seed, k as u64, 1);
        let target = a1 * &v;
        let norm = target.norm();
        if norm <= T::lit(SVD_CUTOFF) * scale1 {
            continue;
        }
        let resid = (&target - a2 * (&p2 * &target)).norm() / norm;
        max_residual = max_residual.max(resid);
    }
    let included = max_residual <= tol;

    // Ratio probes: random directions plus directions in ker(A2^T).
    let complement = DMatrix::<T>::identity(m, m) - a2 * &p2;
    let mut c_random = T::zero();
    let mut witnessed = false;
    for k in 0..trials {
        let u = probe_vector::<T>(m, seed, k as u64, 2);
        let den = (a2.transpose() * &u).norm();
        if den > T::lit(SVD_CUTOFF) * scale2 * u.norm() {
            c_random = c_random.max((a1.transpose() * &u).norm() / den);
        }
        let w = &complement * &u;
        if w.norm() > tol * u.norm() && (a1.transpose() * &w).norm() > tol * scale1 * w.norm() {
            witnessed = true;
        }
    }

    let mut c_est = c_random;
    if included {
        // Maximizer of the ratio: u = (A2^+)^T w with w the top left singular
        // vector of A2^+ A1.
        let b = &p2 * a1;
        if b.nrows() > 0 && b.ncols() > 0 {
            let svd = SVD::new(b, true, false);
            let idx = svd.singular_values.imax();
            let w = svd.u.as_ref().expect("left singular vectors").column(idx).into_owned();
            let u = p2.transpose() * w;
            let den = (a2.transpose() * &u).norm();
            if den > T::zero() {
                c_est = c_est.max((a1.transpose() * &u).norm() / den);
            }
        }
    }

    let (inverse_ratio, inverse_bound_holds) = if included {
        let mut worst = T::zero();
        for k in 0..trials {
            let v = probe_vector::<T>(n1, seed, k as u64, 3);
            let u = a1 * &v;
            let rhs = c_est * (&p1 * &u).norm();
            let lhs = (&p2 * &u).norm();
            if rhs > T::zero() {
                worst = worst.max(lhs / rhs);
            }
        }
        let w = worst.as_f64();
        (Some(w), Some(w <= 1.0 + 1e-9))
    } else {
        (None, None)
    };

    Ok(RangeReport {
        included,
        c_est: Extended(if witnessed && !included { f64::INFINITY } else { c_est.as_f64() }),
        c_random: c_random.as_f64(),
        max_residual: max_residual.as_f64(),
        witnessed_unbounded: witnessed,
        inverse_ratio,
        inverse_bound_holds,
    })
}

const GK_NODES: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const KRONROD_WEIGHTS: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_728,
];
/// Gauss weights on the odd Kronrod nodes (indices 1, 3, 5, 7).
const GAUSS_WEIGHTS: [f64; 4] =
    [0.129_484_966_168_869_7, 0.279_705_391_489_276_7, 0.381_830_050_505_118_9, 0.417_959_183_673_469_4];

fn gauss_kronrod<T: Real>(f: &impl Fn(T) -> T, a: T, b: T) -> (T, T) {
    let half = (b - a) * T::lit(0.5);
    let mid = (a + b) * T::lit(0.5);
    let center = f(mid);
    let mut kronrod = center * T::lit(KRONROD_WEIGHTS[7]);
    let mut gauss = center * T::lit(GAUSS_WEIGHTS[3]);
    for i in 0..7 {
        let dx = half * T::lit(GK_NODES[i]);
        let pair = f(mid - dx) + f(mid + dx);
        kronrod += pair * T::lit(KRONROD_WEIGHTS[i]);
        if i % 2 == 1 {
            gauss += pair * T::lit(GAUSS_WEIGHTS[i / 2]);
        }
    }
    (kronrod * half, (kronrod - gauss).abs() * half)
}

fn adapt<T: Real>(f: &impl Fn(T) -> T, a: T, b: T, rel_tol: T, depth: usize) -> Result<T> {
    let (value, err) = gauss_kronrod(f, a, b);
    if err <= rel_tol * value.abs() || err <= T::tiny() {
        return Ok(value);
    }
    if depth == 0 {
        return Err(Error::Numerical(format!("quadrature did not converge on [{a}, {b}]")));
    }
    let mid = (a + b) * T::lit(0.5);
    Ok(adapt(f, a, mid, rel_tol, depth - 1)? + adapt(f, mid, b, rel_tol, depth - 1)?)
}

/// Adaptive 7/15-point Gauss-Kronrod integration with a per-panel relative
/// tolerance. The tolerance is floored at a hundred machine epsilons.
pub fn integrate<T: Real>(f: impl Fn(T) -> T, a: T, b: T, rel_tol: T) -> Result<T> {
    if a == b {
        return Ok(T::zero());
    }
    let tol = rel_tol.max(T::default_epsilon() * T::lit(100.0));
    adapt(&f, a, b, tol, 60)
}

/// `int_0^t mu_j e^{-2 lambda_j s} ds` by adaptive quadrature.
pub fn quad_covariance<T: Real>(j: usize, t: T, model: &SpectralModel<T>) -> Result<T> {
    let lambda = model.lambda()[j];
    let mu = model.mu()[j];
    if mu == T::zero() {
        return Ok(T::zero());
    }
    let two = lambda + lambda;
    let f = |s: T| mu * (-(two * s)).exp();
    if two <= T::zero() {
        return integrate(f, T::zero(), t, T::lit(1e-12));
    }
    // Panels double in width from the decay scale so no panel can miss the
    // boundary layer at zero.
    let mut total = T::zero();
    let mut lo = T::zero();
    let mut width = T::one() / two;
    while lo < t {
        let hi = (lo + width).min(t);
        total += integrate(f, lo, hi, T::lit(1e-12))?;
        lo = hi;
        width += width;
    }
    Ok(total)
}

/// Absolute floor of [`relative_deviation`], relative to the largest entry.
pub const DEVIATION_FLOOR: f64 = 1e-12;

/// `max |a - b| / max(|a|, |b|, DEVIATION_FLOOR * scale)` with `scale` the
/// largest magnitude in either slice.
pub fn relative_deviation<T: Real>(a: &[T], b: &[T]) -> f64 {
    let scale = a.iter().chain(b).fold(0.0f64, |m, v| m.max(v.as_f64().abs()));
    let floor = (DEVIATION_FLOOR * scale).max(f64::MIN_POSITIVE);
    a.iter()
        .zip(b)
        .map(|(x, y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

/// One closed-form quantity against its brute-force reference.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub name: &'static str,
    pub max_rel_deviation: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Every oracle comparison for one model, grid and bridge target.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleReport {
    pub modes: usize,
    pub grid_points: usize,
    pub comparisons: Vec<Comparison>,
    pub max_rel_deviation: f64,
    pub passed: bool,
}

impl OracleReport {
    pub fn get(&self, name: &str) -> Option<&Comparison> {
        self.comparisons.iter().find(|c| c.name == name)
    }
}

/// Checks the bridge mean and covariance against Schur-complement
/// conditioning of the assembled joint law, the covariance integrals against
/// quadrature, and the Penrose identities of the pseudoinverse of the
/// (singular) joint covariance.
pub fn oracle_report<T: Real>(
    model: &SpectralModel<T>,
    target: &BridgeTarget<T>,
    grid: &TimeGrid<T>,
    tolerance: f64,
) -> Result<OracleReport> {
    let n = model.modes();
    let m = grid.len();
    let block = m + 1;
    let modes: Vec<usize> = (0..n).collect();
    let joint = assemble_joint(model, grid, &modes, &target.x)?;
    let observed: Vec<usize> = (0..n).map(|j| j * block + m).collect();
    let post = condition(&joint, &observed, &target.y)?;

    let mean = bridge_mean(model, target, grid)?;
    let (mut got, mut want) = (Vec::new(), Vec::new());
    for j in 0..n {
        for i in 0..m {
            got.push(mean[(i, j)]);
            want.push(post.mean[j * block + i]);
        }
    }
    let mean_dev = relative_deviation(&got, &want);

    let (mut got, mut want) = (Vec::new(), Vec::new());
    for j in 0..n {
        for (a, &s) in grid.points().iter().enumerate() {
            for (b, &t) in grid.points().iter().enumerate() {
                got.push(bridge_cov_mode(j, s, t, model)?);
                want.push(post.cov[(j * block + a, j * block + b)]);
            }
        }
    }
    let cov_dev = relative_deviation(&got, &want);

    let mut quad_dev = 0.0f64;
    for j in 0..n {
        for &t in grid.points() {
            let dev = relative_deviation(&[q_mode(j, t, model)], &[quad_covariance(j, t, model)?]);
            quad_dev = quad_dev.max(dev);
        }
    }

    let c = &joint.cov;
    let p = pseudoinverse(c);
    let scale = c.amax().max(T::tiny());
    let cp = c * &p;
    let pc = &p * c;
    let penrose = [
        (c * &p * c - c).amax() / scale,
        (&p * c * &p - &p).amax() / p.amax().max(T::tiny()),
        (&cp - cp.transpose()).amax(),
        (&pc - pc.transpose()).amax(),
    ]
    .iter()
    .fold(0.0f64, |acc, v| acc.max(v.as_f64()));

    let comparisons: Vec<Comparison> = [
        ("bridge_mean", mean_dev),
        ("bridge_covariance", cov_dev),
        ("covariance_quadrature", quad_dev),
        ("pseudoinverse_penrose", penrose),
    ]
    .into_iter()
    .map(|(name, dev)| Comparison { name, max_rel_deviation: dev, tolerance, passed: dev <= tolerance })
    .collect();
    let max_rel_deviation = comparisons.iter().fold(0.0f64, |acc, c| acc.max(c.max_rel_deviation));
    Ok(OracleReport {
        modes: n,
        grid_points: m,
        passed: max_rel_deviation <= tolerance,
        max_rel_deviation,
        comparisons,
    })
}
