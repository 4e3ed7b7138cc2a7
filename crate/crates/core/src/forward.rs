//! Exact simulation of the unconditioned mild solution.
//!
//! In the eigenbasis every coefficient `c_j(t) = <X(t), e_j>` is an independent
//! Ornstein-Uhlenbeck process `dc = -lambda_j c dt + sqrt(mu_j) dbeta_j`, so paths
//! on a grid are sampled with exact Gaussian transitions and no time stepping.

use std::io::Write;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::SpectralModel;
use crate::rng;
use crate::scalar::Real;

/// Output time points `0 = t_0 < t_1 < ... < t_m = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid<T> {
    points: Vec<T>,
}

impl<T: Real> TimeGrid<T> {
    pub fn new(points: Vec<T>) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidGrid("need at least the two points 0 and T".into()));
        }
        if points[0] != T::zero() {
            return Err(Error::InvalidGrid(format!("first point must be 0, got {}", points[0])));
        }
        if let Some(i) = (1..points.len()).find(|&i| !(points[i] > points[i - 1]) || !points[i].is_finite()) {
            return Err(Error::InvalidGrid(format!("points not strictly increasing at index {i}")));
        }
        Ok(Self { points })
    }

    /// `n` equispaced points on `[0, horizon]`; the last point is exactly `horizon`.
    pub fn uniform(n: usize, horizon: T) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidGrid("need at least the two points 0 and T".into()));
        }
        let last = T::from_count(n - 1);
        let mut points: Vec<T> = (0..n).map(|i| horizon * T::from_count(i) / last).collect();
        points[n - 1] = horizon;
        Self::new(points)
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn horizon(&self) -> T {
        self.points[self.points.len() - 1]
    }

    /// Step lengths `t_{i+1} - t_i`.
    pub fn steps(&self) -> impl Iterator<Item = T> + '_ {
        self.points.windows(2).map(|w| w[1] - w[0])
    }

    pub(crate) fn check_horizon(&self, horizon: T) -> Result<()> {
        let end = self.horizon();
        if (end - horizon).abs() > T::lit(1e-12) * horizon {
            return Err(Error::InvalidGrid(format!("grid ends at {end} but the model horizon is {horizon}")));
        }
        Ok(())
    }
}

/// Coordinate system of the stored coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Frame {
    /// Sine eigenbasis coefficients `<X(t), e_j>`.
    Spectral,
    /// Nodal values of a piecewise linear finite element function.
    Nodal,
}

/// Sampled trajectories, stored as `samples x grid points x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble<T> {
    grid: TimeGrid<T>,
    width: usize,
    n_samples: usize,
    data: Vec<T>,
    seed: u64,
    frame: Frame,
}

impl<T: Real> PathEnsemble<T> {
    pub(crate) fn from_paths(grid: TimeGrid<T>, width: usize, paths: Vec<Vec<T>>, seed: u64, frame: Frame) -> Self {
        let n_samples = paths.len();
        let mut data = Vec::with_capacity(n_samples * grid.len() * width);
        for p in paths {
            debug_assert_eq!(p.len(), grid.len() * width);
            data.extend(p);
        }
        Self { grid, width, n_samples, data, seed, frame }
    }

    pub fn grid(&self) -> &TimeGrid<T> {
        &self.grid
    }

    /// Number of modes (spectral frame) or nodes (nodal frame).
    pub fn width(&self) -> usize {
        self.width
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn frame(&self) -> Frame {
        self.frame
    }

    pub fn get(&self, sample: usize, point: usize, index: usize) -> T {
        self.data[(sample * self.grid.len() + point) * self.width + index]
    }

    /// One trajectory, `grid points x width`, row major.
    pub fn path(&self, sample: usize) -> &[T] {
        let len = self.grid.len() * self.width;
        &self.data[sample * len..(sample + 1) * len]
    }

    pub fn paths(&self) -> impl Iterator<Item = &[T]> {
        self.data.chunks_exact(self.grid.len() * self.width)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Writes `sample,t,coeff_1,...` (or `node_1,...`) with 17 significant digits.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        let label = match self.frame {
            Frame::Spectral => "coeff",
            Frame::Nodal => "node",
        };
        let mut line = String::from("sample,t");
        for k in 1..=self.width {
            line.push_str(&format!(",{label}_{k}"));
        }
        writeln!(out, "{line}")?;
        for s in 0..self.n_samples {
            for (i, t) in self.grid.points().iter().enumerate() {
                line.clear();
                line.push_str(&format!("{s},{t:.16e}"));
                for k in 0..self.width {
                    line.push_str(&format!(",{:.16e}", self.get(s, i, k)));
                }
                writeln!(out, "{line}")?;
            }
        }
        Ok(())
    }
}

/// `mu (1 - e^{-2 lambda t}) / (2 lambda)`.
#[inline]
pub fn ou_variance<T: Real>(lambda: T, mu: T, t: T) -> T {
    mu * T::decay_integral(lambda + lambda, t)
}

/// `q_j(t)`: variance of mode `j` (zero based) at time `t` started from a
/// deterministic value.
pub fn q_mode<T: Real>(j: usize, t: T, model: &SpectralModel<T>) -> T {
    ou_variance(model.lambda()[j], model.mu()[j], t)
}

/// Two-time covariance `r_j(s, t) = q_j(min(s, t)) e^{-lambda_j |t - s|}`.
pub fn cov_mode<T: Real>(j: usize, s: T, t: T, model: &SpectralModel<T>) -> T {
    let lambda = model.lambda()[j];
    let (lo, hi) = if s <= t { (s, t) } else { (t, s) };
    q_mode(j, lo, model) * (-(lambda * (hi - lo))).exp()
}

/// Per-step transition coefficients of every mode on a fixed grid.
#[derive(Debug, Clone)]
pub struct ForwardKernel<T> {
    modes: usize,
    steps: usize,
    /// `e^{-lambda_j dt_i}`, step major.
    decay: Vec<T>,
    /// `sqrt(q_j(dt_i))`, step major.
    std: Vec<T>,
}

impl<T: Real> ForwardKernel<T> {
    pub fn new(model: &SpectralModel<T>, grid: &TimeGrid<T>) -> Self {
        let modes = model.modes();
        let mut decay = Vec::with_capacity((grid.len() - 1) * modes);
        let mut std = Vec::with_capacity((grid.len() - 1) * modes);
        for dt in grid.steps() {
            for (&l, &m) in model.lambda().iter().zip(model.mu()) {
                decay.push((-(l * dt)).exp());
                std.push(ou_variance(l, m, dt).sqrt());
            }
        }
        Self { modes, steps: grid.len() - 1, decay, std }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    /// Writes the path of one sample into `out` (`grid points x modes`).
    pub fn fill_path(&self, x: &[T], seed: u64, sample: u64, out: &mut [T]) {
        let m = self.modes;
        out[..m].copy_from_slice(x);
        for j in 0..m {
            let mut stream = rng::substream(seed, rng::STREAM_W, sample, j as u64);
            for i in 0..self.steps {
                let xi = rng::standard_normal(&mut stream);
                out[(i + 1) * m + j] = self.decay[i * m + j] * out[i * m + j] + self.std[i * m + j] * T::lit(xi);
            }
        }
    }

    /// Same as [`fill_path`](Self::fill_path) but reading pre-drawn variates.
    pub fn fill_path_from(&self, x: &[T], noise: &DrivingNoise, out: &mut [T]) {
        let m = self.modes;
        out[..m].copy_from_slice(x);
        for i in 0..self.steps {
            let (prev, next) = out[i * m..(i + 2) * m].split_at_mut(m);
            let row = i * m;
            for j in 0..m {
                next[j] = self.decay[row + j] * prev[j] + self.std[row + j] * T::lit(noise.get(i, j));
            }
        }
    }
}

/// Driving variates for one sample, `steps x modes`, as consumed by
/// [`ForwardKernel::fill_path`].
#[derive(Debug, Clone)]
pub struct DrivingNoise {
    modes: usize,
    values: Vec<f64>,
}

impl DrivingNoise {
    pub fn draw(seed: u64, sample: u64, modes: usize, steps: usize) -> Self {
        let mut values = vec![0.0; modes * steps];
        for j in 0..modes {
            let mut stream = rng::substream(seed, rng::STREAM_W, sample, j as u64);
            for i in 0..steps {
                values[i * modes + j] = rng::standard_normal(&mut stream);
            }
        }
        Self { modes, values }
    }

    pub fn modes(&self) -> usize {
        self.modes
    }

    #[inline]
    pub fn get(&self, step: usize, mode: usize) -> f64 {
        self.values[step * self.modes + mode]
    }
}

pub(crate) fn check_len<T>(what: &'static str, v: &[T], expected: usize) -> Result<()> {
    if v.len() != expected {
        return Err(Error::DimensionMismatch { what, expected, got: v.len() });
    }
    Ok(())
}

/// Samples `n_samples` paths of `X^x` on `grid`.
pub fn sample_forward<T: Real>(
    model: &SpectralModel<T>,
    x: &[T],
    grid: &TimeGrid<T>,
    n_samples: usize,
    seed: u64,
) -> Result<PathEnsemble<T>> {
    check_len("initial value", x, model.modes())?;
    grid.check_horizon(model.horizon())?;
    let kernel = ForwardKernel::new(model, grid);
    let len = grid.len() * model.modes();
    let paths: Vec<Vec<T>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let mut p = vec![T::zero(); len];
            kernel.fill_path(x, seed, s as u64, &mut p);
            p
        })
        .collect();
    Ok(PathEnsemble::from_paths(grid.clone(), model.modes(), paths, seed, Frame::Spectral))
}

/// Observation noise coefficients `z_j = <Z, e_j>` of one sample.
pub fn observation_noise<T: Real>(mu_tilde: &[T], seed: u64, sample: u64) -> Vec<T> {
    let mut stream = rng::substream(seed, rng::STREAM_Z, sample, 0);
    mu_tilde.iter().map(|&m| m.sqrt() * T::lit(rng::standard_normal(&mut stream))).collect()
}

/// `samples x modes` matrix of observation noise coefficients, row major.
pub fn sample_observation<T: Real>(model: &SpectralModel<T>, n_samples: usize, seed: u64) -> Vec<Vec<T>> {
    (0..n_samples).into_par_iter().map(|s| observation_noise(model.mu_tilde(), seed, s as u64)).collect()
}
