//! SPDE bridge with observation noise.
//!
//! Conditioning `X^x` on `X^x(T) + Z = y` keeps every eigenmode independent.
//! Per mode the bridge is
//!
//! ```text
//! b_j(t) = c_j(t) - k_j(t) (c_j(T) + z_j - y_j),
//! k_j(t) = q_j(t) e^{-lambda_j (T - t)} / (q_j(T) + mu~_j),
//! ```
//!
//! which is exact in law and does not depend on the observation-space exponent.

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::forward::{check_len, cov_mode, observation_noise, q_mode, ForwardKernel, Frame, PathEnsemble, TimeGrid};
use crate::model::SpectralModel;
use crate::rng;
use crate::scalar::Real;

/// Initial value, conditioning value and declared smoothness of the initial value.
#[derive(Debug, Clone, PartialEq)]
pub struct BridgeTarget<T> {
    pub x: Vec<T>,
    pub y: Vec<T>,
    pub chi: T,
}

impl<T: Real> BridgeTarget<T> {
    pub fn zero(modes: usize) -> Self {
        Self { x: vec![T::zero(); modes], y: vec![T::zero(); modes], chi: T::lit(2.0) }
    }

    pub fn new(x: Vec<T>, y: Vec<T>, chi: T) -> Result<Self> {
        check_len("conditioning value", &y, x.len())?;
        if x.iter().chain(&y).any(|v| !v.is_finite()) || !chi.is_finite() {
            return Err(Error::InvalidParameter("bridge target entries must be finite".into()));
        }
        Ok(Self { x, y, chi })
    }

    pub fn is_zero(&self) -> bool {
        self.x.iter().chain(&self.y).all(|v| *v == T::zero())
    }

    pub fn truncate(&self, n: usize) -> Self {
        Self { x: self.x[..n].to_vec(), y: self.y[..n].to_vec(), chi: self.chi }
    }

    fn check(&self, modes: usize) -> Result<()> {
        check_len("initial value", &self.x, modes)?;
        check_len("conditioning value", &self.y, modes)
    }
}

/// `q_j(T) + mu~_j`, rejecting modes on which the observation carries a
/// degenerate covariance.
pub fn denominator<T: Real>(j: usize, model: &SpectralModel<T>) -> Result<T> {
    let d = q_mode(j, model.horizon(), model) + model.mu_tilde()[j];
    if d > T::zero() {
        Ok(d)
    } else {
        Err(Error::NotInjective { mode: j + 1 })
    }
}

/// Correction gain `k_j(t)` in `H` coordinates (zero based mode index).
pub fn gain<T: Real>(j: usize, t: T, model: &SpectralModel<T>) -> Result<T> {
    let d = denominator(j, model)?;
    let lambda = model.lambda()[j];
    Ok(q_mode(j, t, model) * (-(lambda * (model.horizon() - t))).exp() / d)
}

/// Bridge covariance `c_j(s, t) = r_j(s, t) - r_j(s, T) r_j(t, T) / (q_j(T) + mu~_j)`.
///
/// Evaluated as `r_j(s, t) (q_j(T - t) + mu~_j) / (q_j(T) + mu~_j)` for `s <= t`,
/// using `q_j(T) - e^{-2 lambda_j (T - t)} q_j(t) = q_j(T - t)`, which avoids the
/// cancellation near a pinned endpoint.
pub fn bridge_cov_mode<T: Real>(j: usize, s: T, t: T, model: &SpectralModel<T>) -> Result<T> {
    let d = denominator(j, model)?;
    let later = if s <= t { t } else { s };
    let remaining = q_mode(j, model.horizon() - later, model) + model.mu_tilde()[j];
    Ok(cov_mode(j, s, t, model) * remaining / d)
}

/// Gains on a grid, `grid points x modes`.
#[derive(Debug, Clone)]
pub struct BridgeCoefficients<T> {
    pub k: DMatrix<T>,
    pub denom: Vec<T>,
}

impl<T: Real> BridgeCoefficients<T> {
    pub fn new(model: &SpectralModel<T>, grid: &TimeGrid<T>) -> Result<Self> {
        grid.check_horizon(model.horizon())?;
        let denom = (0..model.modes()).map(|j| denominator(j, model)).collect::<Result<Vec<_>>>()?;
        let end = model.horizon();
        let k = DMatrix::from_fn(grid.len(), model.modes(), |i, j| {
            let t = grid.points()[i];
            q_mode(j, t, model) * (-(model.lambda()[j] * (end - t))).exp() / denom[j]
        });
        Ok(Self { k, denom })
    }

    /// Applies `b(t_i) = c(t_i) - k(t_i) (c(T) + z - y)` to one forward path in place.
    pub fn condition_path(&self, path: &mut [T], z: &[T], y: &[T]) {
        let (points, modes) = self.k.shape();
        let last = (points - 1) * modes;
        let innovation: Vec<T> = (0..modes).map(|j| path[last + j] + z[j] - y[j]).collect();
        for i in 0..points {
            for j in 0..modes {
                path[i * modes + j] -= self.k[(i, j)] * innovation[j];
            }
        }
    }
}

/// Conditional mean `E[X^0(t_i) | X^0(T) + Z]` for observed coefficients
/// `obs_coeffs`, `grid points x modes`.
pub fn conditional_mean<T: Real>(model: &SpectralModel<T>, obs_coeffs: &[T], grid: &TimeGrid<T>) -> Result<DMatrix<T>> {
    check_len("observation", obs_coeffs, model.modes())?;
    let coeffs = BridgeCoefficients::new(model, grid)?;
    let mut k = coeffs.k;
    for (j, &o) in obs_coeffs.iter().enumerate() {
        k.column_mut(j).scale_mut(o);
    }
    Ok(k)
}

/// Mean of the bridge: `e^{-lambda t} x + k(t) (y - e^{-lambda T} x)`.
pub fn bridge_mean<T: Real>(
    model: &SpectralModel<T>,
    target: &BridgeTarget<T>,
    grid: &TimeGrid<T>,
) -> Result<DMatrix<T>> {
    target.check(model.modes())?;
    let coeffs = BridgeCoefficients::new(model, grid)?;
    let end = model.horizon();
    Ok(DMatrix::from_fn(grid.len(), model.modes(), |i, j| {
        let l = model.lambda()[j];
        let t = grid.points()[i];
        let x = target.x[j];
        (-(l * t)).exp() * x + coeffs.k[(i, j)] * (target.y[j] - (-(l * end)).exp() * x)
    }))
}

/// Samples the bridge `X^{x,y}` on `grid`.
///
/// Forward paths and observation noise use the keyed substreams, so
/// the first `N` columns equal the sample of the `N`-mode truncation.
pub fn sample_bridge<T: Real>(
    model: &SpectralModel<T>,
    target: &BridgeTarget<T>,
    grid: &TimeGrid<T>,
    n_samples: usize,
    seed: u64,
) -> Result<PathEnsemble<T>> {
    target.check(model.modes())?;
    let coeffs = BridgeCoefficients::new(model, grid)?;
    let kernel = ForwardKernel::new(model, grid);
    let len = grid.len() * model.modes();
    let paths: Vec<Vec<T>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut p = vec![T::zero(); len];
            kernel.fill_path(&target.x, seed, s as u64, &mut p);
            let z = observation_noise(model.mu_tilde(), seed, s as u64);
            coeffs.condition_path(&mut p, &z, &target.y);
            p
        })
        .collect();
    Ok(PathEnsemble::from_paths(grid.clone(), model.modes(), paths, seed, Frame::Spectral))
}

/// Spectral Galerkin truncation to the first `n` modes.
pub fn truncate_bridge<T: Real>(model: &SpectralModel<T>, n: usize) -> Result<SpectralModel<T>> {
    if n == 0 || n > model.modes() {
        return Err(Error::InvalidParameter(format!("truncation level {n} outside 1..={}", model.modes())));
    }
    Ok(model.restrict(n))
}

/// Samples the bridge from its mean and covariance kernel, mode by mode.
///
/// Slower than [`sample_bridge`] and not coupled with it; kept as an
/// independent cross-check of the correction formula.
pub fn sample_bridge_from_kernel<T: Real>(
    model: &SpectralModel<T>,
    target: &BridgeTarget<T>,
    grid: &TimeGrid<T>,
    n_samples: usize,
    seed: u64,
) -> Result<PathEnsemble<T>> {
    let mean = bridge_mean(model, target, grid)?;
    let m = grid.len();
    let mut roots = Vec::with_capacity(model.modes());
    for j in 0..model.modes() {
        let mut kern = DMatrix::<T>::zeros(m, m);
        for a in 0..m {
            for b in 0..=a {
                let v = bridge_cov_mode(j, grid.points()[a], grid.points()[b], model)?;
                kern[(a, b)] = v;
                kern[(b, a)] = v;
            }
        }
        let eig = SymmetricEigen::new(kern);
        let sqrt_vals = eig.eigenvalues.map(|v| v.max(T::zero()).sqrt());
        roots.push(&eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals));
    }
    let modes = model.modes();
    let paths: Vec<Vec<T>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut p = vec![T::zero(); m * modes];
            for (j, root) in roots.iter().enumerate() {
                let mut stream = rng::substream(seed, rng::STREAM_PROBE, s as u64, j as u64);
                let xi: Vec<T> = (0..m).map(|_| T::lit(rng::standard_normal(&mut stream))).collect();
                for i in 0..m {
                    let mut v = mean[(i, j)];
                    for (c, x) in xi.iter().enumerate() {
                        v += root[(i, c)] * *x;
                    }
                    p[i * modes + j] = v;
                }
            }
            p
        })
        .collect();
    Ok(PathEnsemble::from_paths(grid.clone(), modes, paths, seed, Frame::Spectral))
}
