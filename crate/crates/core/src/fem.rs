//! Piecewise linear finite elements on a uniform mesh of `(0, 1)`.
//!
//! Work is done in the M-orthonormal eigenbasis `Psi` of the discrete
//! operator: a nodal vector `c` has modal coordinates `d = Psi^T M c` and
//! `c = Psi d`, and the discrete semigroup is diagonal there. The driving
//! noise is the truncated sine expansion of the spectral reference mapped
//! through `W = Psi^T B` with `B_ij = <phi_i, e_j>`, so finite element paths
//! and spectral paths can share one realization of `W`.

use std::f64::consts::PI;
use std::io::Write;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};
use rayon::prelude::*;
use serde::Serialize;

use crate::bridge::BridgeTarget;
use crate::error::{Error, Result};
use crate::forward::{check_len, DrivingNoise, Frame, PathEnsemble, TimeGrid};
use crate::model::SpectralModel;
use crate::rng;
use crate::scalar::Real;

/// Threshold, relative to the largest entry of `W`, below which entries are
/// aliasing round-off and dropped from the column supports.
pub const SUPPORT_CUTOFF: f64 = 1e-9;

/// Minimum ratio between reference modes and degrees of freedom.
pub const MODES_PER_DOF: usize = 4;

/// Uniform mesh of `(0, 1)` with `1/h` cells; only interior nodes carry
/// degrees of freedom.
#[derive(Debug, Clone, PartialEq)]
pub struct FemMesh<T> {
    h: T,
    cells: usize,
    nodes: Vec<T>,
}

#[derive(Serialize)]
struct MeshSidecar<'a> {
    h: f64,
    n_dof: usize,
    nodes: &'a [f64],
}

impl<T: Real> FemMesh<T> {
    /// Rejects `h` unless `1/h` is an integer of at least 2.
    pub fn uniform(h: T) -> Result<Self> {
        if !(h > T::zero()) || !h.is_finite() {
            return Err(Error::InvalidParameter(format!("mesh width must be positive, got {h}")));
        }
        let inv = T::one() / h;
        let cells = inv.round();
        if (inv - cells).abs() > T::lit(1e-9) * inv || cells < T::lit(2.0) {
            return Err(Error::InvalidParameter(format!("1/h must be an integer >= 2, got 1/h = {inv}")));
        }
        let cells = cells.as_f64() as usize;
        let n = T::from_count(cells);
        let nodes = (1..cells).map(|i| T::from_count(i) / n).collect();
        Ok(Self { h: T::one() / n, cells, nodes })
    }

    pub fn h(&self) -> T {
        self.h
    }

    pub fn cells(&self) -> usize {
        self.cells
    }

    /// Interior node coordinates, strictly increasing.
    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn n_dof(&self) -> usize {
        self.nodes.len()
    }

    /// JSON with `h`, `n_dof` and the interior node coordinates.
    pub fn write_sidecar<W: Write>(&self, out: W) -> Result<()> {
        let nodes: Vec<f64> = self.nodes.iter().map(|x| x.as_f64()).collect();
        let side = MeshSidecar { h: self.h.as_f64(), n_dof: self.n_dof(), nodes: &nodes };
        serde_json::to_writer_pretty(out, &side).map_err(|e| Error::Io(crate::error::IoError(e.to_string())))
    }
}

/// Mesh, mass and stiffness matrices and the generalized eigendecomposition
/// `K psi = lambda_h M psi`. Immutable after assembly.
#[derive(Debug, Clone)]
pub struct FemSystem<T: Real> {
    mesh: FemMesh<T>,
    mass: DMatrix<T>,
    stiffness: DMatrix<T>,
    mass_chol: Cholesky<T, Dyn>,
    eigvals: Vec<T>,
    eigvecs: DMatrix<T>,
}

/// `(6/h^2) (1 - cos k pi h) / (2 + cos k pi h)` for `k >= 1`.
pub fn discrete_eigenvalue<T: Real>(h: T, k: usize) -> T {
    let c = (T::from_count(k) * T::pi() * h).cos();
    T::lit(6.0) / (h * h) * (T::one() - c) / (T::lit(2.0) + c)
}

/// Assembles the system on the uniform mesh of width `h`.
pub fn assemble<T: Real>(h: T) -> Result<FemSystem<T>> {
    let mesh = FemMesh::uniform(h)?;
    let n = mesh.n_dof();
    let h = mesh.h();
    let mut mass = DMatrix::zeros(n, n);
    let mut stiffness = DMatrix::zeros(n, n);
    for i in 0..n {
        mass[(i, i)] = T::lit(2.0) * h / T::lit(3.0);
        stiffness[(i, i)] = T::lit(2.0) / h;
        if i + 1 < n {
            mass[(i, i + 1)] = h / T::lit(6.0);
            mass[(i + 1, i)] = h / T::lit(6.0);
            stiffness[(i, i + 1)] = -T::one() / h;
            stiffness[(i + 1, i)] = -T::one() / h;
        }
    }
    let mass_chol =
        Cholesky::new(mass.clone()).ok_or_else(|| Error::Numerical("mass matrix is not positive definite".into()))?;
    let l = mass_chol.l();
    // L^{-1} K L^{-T}, using the symmetry of K.
    let lk = l
        .solve_lower_triangular(&stiffness)
        .ok_or_else(|| Error::Numerical("triangular solve with the mass factor failed".into()))?;
    let mut reduced = l
        .solve_lower_triangular(&lk.transpose())
        .ok_or_else(|| Error::Numerical("triangular solve with the mass factor failed".into()))?;
    reduced = (&reduced + reduced.transpose()) * T::lit(0.5);
    let eig = SymmetricEigen::new(reduced);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).expect("finite eigenvalues"));
    let eigvals: Vec<T> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let sorted = DMatrix::from_fn(n, n, |i, c| eig.eigenvectors[(i, order[c])]);
    let mut eigvecs = l
        .tr_solve_lower_triangular(&sorted)
        .ok_or_else(|| Error::Numerical("triangular solve with the mass factor failed".into()))?;
    // Sign convention: the first non-negligible entry of each column is positive.
    for mut col in eigvecs.column_iter_mut() {
        let cut = col.amax() * T::lit(1e-8);
        if let Some(first) = col.iter().copied().find(|v| v.abs() > cut) {
            if first < T::zero() {
                col.neg_mut();
            }
        }
    }
    Ok(FemSystem { mesh, mass, stiffness, mass_chol, eigvals, eigvecs })
}

impl<T: Real> FemSystem<T> {
    pub fn mesh(&self) -> &FemMesh<T> {
        &self.mesh
    }

    pub fn n_dof(&self) -> usize {
        self.mesh.n_dof()
    }

    pub fn mass(&self) -> &DMatrix<T> {
        &self.mass
    }

    pub fn stiffness(&self) -> &DMatrix<T> {
        &self.stiffness
    }

    /// `lambda_{h,k}`, nondecreasing.
    pub fn eigvals(&self) -> &[T] {
        &self.eigvals
    }

    /// M-orthonormal eigenvectors as columns.
    pub fn eigvecs(&self) -> &DMatrix<T> {
        &self.eigvecs
    }

    /// `Psi^T M c`.
    pub fn to_modal(&self, c: &DVector<T>) -> DVector<T> {
        self.eigvecs.tr_mul(&(&self.mass * c))
    }

    /// `Psi d`.
    pub fn to_nodal(&self, d: &DVector<T>) -> DVector<T> {
        &self.eigvecs * d
    }

    /// Solves `M c = b`.
    pub fn solve_mass(&self, b: &DVector<T>) -> DVector<T> {
        self.mass_chol.solve(b)
    }

    /// Value at `x` of the finite element function with nodal values `c`.
    pub fn evaluate(&self, c: &[T], x: T) -> T {
        let n = self.mesh.cells();
        if !(x > T::zero() && x < T::one()) {
            return T::zero();
        }
        let pos = x * T::from_count(n);
        let cell = (pos.floor().as_f64() as usize).min(n - 1);
        let xi = pos - T::from_count(cell);
        let node = |g: usize| if g == 0 || g == n { T::zero() } else { c[g - 1] };
        node(cell) * (T::one() - xi) + node(cell + 1) * xi
    }
}

/// `<phi_i, sqrt(2) sin(j pi x)>` for every interior node `i`, `j >= 1`:
/// `sqrt(2) sin(j pi x_i) 4 sin^2(j pi h / 2) / ((j pi)^2 h)`.
pub fn sine_inner<T: Real>(mesh: &FemMesh<T>, j: usize) -> DVector<T> {
    let h = mesh.h();
    let w = T::from_count(j) * T::pi();
    let s = (w * h * T::lit(0.5)).sin();
    let factor = T::lit(2.0).sqrt() * T::lit(4.0) * s * s / (w * w * h);
    DVector::from_iterator(mesh.n_dof(), mesh.nodes().iter().map(|&x| factor * (w * x).sin()))
}

/// `B`, `n_dof x modes`.
pub fn load_matrix<T: Real>(mesh: &FemMesh<T>, modes: usize) -> DMatrix<T> {
    let mut b = DMatrix::zeros(mesh.n_dof(), modes);
    for j in 0..modes {
        b.set_column(j, &sine_inner(mesh, j + 1));
    }
    b
}

/// Input of [`project_l2`].
pub enum FemInput<'a, T> {
    /// Coefficients in the sine eigenbasis, first entry for `e_1`.
    Coefficients(&'a [T]),
    /// Pointwise values, integrated with two Gauss points per cell.
    Function(&'a dyn Fn(T) -> T),
}

/// Nodal vector of the L2 projection onto the finite element space.
pub fn project_l2<T: Real>(input: FemInput<'_, T>, sys: &FemSystem<T>) -> Result<DVector<T>> {
    let mesh = sys.mesh();
    let n = mesh.n_dof();
    let mut b = DVector::zeros(n);
    match input {
        FemInput::Coefficients(coeffs) => {
            for (j, &a) in coeffs.iter().enumerate() {
                if a != T::zero() {
                    b.axpy(a, &sine_inner(mesh, j + 1), T::one());
                }
            }
        }
        FemInput::Function(f) => {
            let h = mesh.h();
            let offset = T::lit(0.5 / 3f64.sqrt());
            for cell in 0..mesh.cells() {
                let left = T::from_count(cell) * h;
                for xi in [T::lit(0.5) - offset, T::lit(0.5) + offset] {
                    let v = f(left + xi * h);
                    if !v.is_finite() {
                        return Err(Error::InvalidParameter(format!(
                            "projected function is not finite at x = {}",
                            left + xi * h
                        )));
                    }
                    let wv = v * h * T::lit(0.5);
                    if cell > 0 {
                        b[cell - 1] += wv * (T::one() - xi);
                    }
                    if cell < n {
                        b[cell] += wv * xi;
                    }
                }
            }
        }
    }
    if b.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("load vector is not finite".into()));
    }
    Ok(sys.solve_mass(&b))
}

/// `S_h(t) c = Psi diag(e^{-lambda_h t}) Psi^T M c`.
pub fn semigroup_h<T: Real>(t: T, c: &DVector<T>, sys: &FemSystem<T>) -> Result<DVector<T>> {
    if !(t >= T::zero()) {
        return Err(Error::InvalidParameter(format!("semigroup time must be nonnegative, got {t}")));
    }
    check_len("nodal vector", c.as_slice(), sys.n_dof())?;
    let mut d = sys.to_modal(c);
    for (v, &l) in d.iter_mut().zip(sys.eigvals()) {
        *v *= (-(l * t)).exp();
    }
    Ok(sys.to_nodal(&d))
}

const GAUSS5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// L2 distance between the finite element function `c` and `f`, five Gauss
/// points per cell.
pub fn l2_distance_fn<T: Real>(sys: &FemSystem<T>, c: &[T], f: impl Fn(T) -> T) -> T {
    let h = sys.mesh().h();
    let mut acc = T::zero();
    for cell in 0..sys.mesh().cells() {
        let mid = (T::from_count(cell) + T::lit(0.5)) * h;
        for (node, weight) in GAUSS5 {
            let x = mid + T::lit(node) * h * T::lit(0.5);
            let d = sys.evaluate(c, x) - f(x);
            acc += T::lit(weight) * h * T::lit(0.5) * d * d;
        }
    }
    acc.sqrt()
}

/// `W = Psi^T B` for a reference truncation of `modes` sine modes.
#[derive(Debug, Clone)]
pub struct FemCoupling<T: Real> {
    w: DMatrix<T>,
    support: Vec<Vec<(usize, T)>>,
}

impl<T: Real> FemCoupling<T> {
    /// Requires `modes >= 4 n_dof` so the reference resolves the projected noise.
    pub fn new(sys: &FemSystem<T>, modes: usize) -> Result<Self> {
        let n = sys.n_dof();
        if modes < MODES_PER_DOF * n {
            return Err(Error::InvalidParameter(format!(
                "reference truncation J = {modes} below {MODES_PER_DOF} x n_dof = {}",
                MODES_PER_DOF * n
            )));
        }
        let w = sys.eigvecs().tr_mul(&load_matrix(sys.mesh(), modes));
        let cut = w.amax() * T::lit(SUPPORT_CUTOFF);
        let support = (0..modes)
            .map(|j| {
                let col = w.column(j);
                col.iter().enumerate().filter(|(_, v)| v.abs() > cut).map(|(k, &v)| (k, v)).collect()
            })
            .collect();
        Ok(Self { w, support })
    }

    pub fn modes(&self) -> usize {
        self.w.ncols()
    }

    pub fn n_dof(&self) -> usize {
        self.w.nrows()
    }

    /// Dense `W`, `n_dof x modes`.
    pub fn w(&self) -> &DMatrix<T> {
        &self.w
    }

    /// Discrete modes fed by reference mode `j` (zero based) with weights `W_kj`.
    pub fn support(&self, j: usize) -> &[(usize, T)] {
        &self.support[j]
    }

    /// Modal coordinates `W a` of the projection of a sine expansion `a`.
    pub fn project(&self, a: &[T]) -> DVector<T> {
        let mut d = DVector::zeros(self.n_dof());
        for (j, &v) in a.iter().enumerate().take(self.modes()) {
            for &(k, w) in &self.support[j] {
                d[k] += w * v;
            }
        }
        d
    }

    /// `W^T d`: sine coefficients of a finite element function.
    pub fn sine_coefficients(&self, d: &[T]) -> Vec<T> {
        self.support.iter().map(|s| s.iter().fold(T::zero(), |acc, &(k, w)| acc + w * d[k])).collect()
    }

    /// `G = W diag(mu) W^T`, covariance rate of the projected noise.
    pub fn noise_covariance(&self, mu: &[T]) -> DMatrix<T> {
        let n = self.n_dof();
        let mut g = DMatrix::zeros(n, n);
        for (j, s) in self.support.iter().enumerate() {
            for &(k, wk) in s {
                for &(l, wl) in s {
                    g[(k, l)] += wk * wl * mu[j];
                }
            }
        }
        g
    }

    /// Squared L2 distance between the sine expansion `a` (length `modes`)
    /// and the finite element function with modal coordinates `d`:
    /// `|a - W^T d|^2 + |d|^2 - |W^T d|^2`.
    pub fn l2_distance_sq(&self, a: &[T], d: &[T]) -> T {
        let mut cross = T::zero();
        let mut proj = T::zero();
        for (j, s) in self.support.iter().enumerate() {
            let v = s.iter().fold(T::zero(), |acc, &(k, w)| acc + w * d[k]);
            let diff = a[j] - v;
            cross += diff * diff;
            proj += v * v;
        }
        let own = d.iter().fold(T::zero(), |acc, &v| acc + v * v);
        cross + (own - proj).max(T::zero())
    }
}

fn check_reference<T_>(model: &SpectralModel<T_>) -> Result<()>
where
    T_: Real,
{
    for (j, &l) in model.lambda().iter().enumerate() {
        let exact = T_::lit(PI * (j + 1) as f64).powi(2);
        if (l - exact).abs() > T_::lit(1e-10) * exact {
            return Err(Error::InvalidParameter(format!(
                "finite element coupling needs the Dirichlet eigenvalues; mode {} has {l}",
                j + 1
            )));
        }
    }
    Ok(())
}

/// Cholesky factor with negative pivots clamped to zero.
fn clamped_cholesky<T: Real>(c: &DMatrix<T>) -> DMatrix<T> {
    let n = c.nrows();
    let mut l = DMatrix::zeros(n, n);
    for j in 0..n {
        let mut d = c[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        let pivot = d.max(T::zero()).sqrt();
        l[(j, j)] = pivot;
        for i in j + 1..n {
            let mut v = c[(i, j)];
            for k in 0..j {
                v -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = if pivot > T::zero() { v / pivot } else { T::zero() };
        }
    }
    l
}

/// Exact transitions of the modal finite element process driven by the
/// reference noise.
///
/// Over a step of length `dt`, reference mode `j` contributes the stochastic
/// integrals `int e^{-r (dt - s)} dbeta_j(s)` at its own rate and at the rates
/// of the discrete modes it feeds. Their joint Gaussian is factored once per
/// step; the integral at the reference rate uses the same variate as the
/// spectral sampler.
#[derive(Debug, Clone)]
pub struct FemKernel<T> {
    n_dof: usize,
    modes: usize,
    steps: usize,
    decay: Vec<T>,
    /// Per mode: `(offset into a step block, support)`.
    layout: Vec<(usize, Vec<usize>)>,
    block: usize,
    coef: Vec<T>,
}

impl<T: Real> FemKernel<T> {
    pub fn new(
        sys: &FemSystem<T>,
        coupling: &FemCoupling<T>,
        model: &SpectralModel<T>,
        grid: &TimeGrid<T>,
    ) -> Result<Self> {
        if model.modes() != coupling.modes() {
            return Err(Error::DimensionMismatch {
                what: "reference modes",
                expected: coupling.modes(),
                got: model.modes(),
            });
        }
        check_reference(model)?;
        grid.check_horizon(model.horizon())?;
        let n = sys.n_dof();
        let modes = model.modes();
        let mut layout = Vec::with_capacity(modes);
        let mut block = 0;
        for j in 0..modes {
            let s = coupling.support(j);
            if s.len() + 1 > 256 {
                return Err(Error::Numerical(format!("coupling column {} too wide", j + 1)));
            }
            layout.push((block, s.iter().map(|&(k, _)| k).collect::<Vec<_>>()));
            block += s.len() * (s.len() + 1);
        }
        let steps = grid.len() - 1;
        let mut decay = Vec::with_capacity(steps * n);
        let mut coef = Vec::with_capacity(steps * block);
        for dt in grid.steps() {
            decay.extend(sys.eigvals().iter().map(|&l| (-(l * dt)).exp()));
            for j in 0..modes {
                let s = coupling.support(j);
                if s.is_empty() {
                    continue;
                }
                let mut rates = vec![model.lambda()[j]];
                rates.extend(s.iter().map(|&(k, _)| sys.eigvals()[k]));
                let m = rates.len();
                let cov = DMatrix::from_fn(m, m, |a, b| T::decay_integral(rates[a] + rates[b], dt));
                let l = clamped_cholesky(&cov);
                let root_mu = model.mu()[j].sqrt();
                for (c, &(_, w)) in s.iter().enumerate() {
                    for col in 0..m {
                        coef.push(w * root_mu * l[(c + 1, col)]);
                    }
                }
            }
        }
        Ok(Self { n_dof: n, modes, steps, decay, layout, block, coef })
    }

    /// Fills `out` (`grid points x n_dof`, modal) from `d0` using the shared
    /// reference noise of one sample.
    pub fn fill_modal(&self, d0: &[T], noise: &DrivingNoise, seed: u64, sample: u64, out: &mut [T]) {
        debug_assert_eq!(noise.modes(), self.modes);
        let n = self.n_dof;
        out[..n].copy_from_slice(d0);
        // Companion variates: one substream per mode, `support` per step.
        let width: usize = self.layout.iter().map(|(_, s)| s.len()).sum();
        let mut companions = vec![0.0; width * self.steps];
        let mut start = 0;
        for (j, (_, support)) in self.layout.iter().enumerate() {
            if support.is_empty() {
                continue;
            }
            let mut stream = rng::substream(seed, rng::STREAM_FEM, sample, j as u64);
            for i in 0..self.steps {
                for c in 0..support.len() {
                    companions[i * width + start + c] = rng::standard_normal(&mut stream);
                }
            }
            start += support.len();
        }
        let mut xi = Vec::new();
        for i in 0..self.steps {
            let (prev, next) = out[i * n..(i + 2) * n].split_at_mut(n);
            let decay = &self.decay[i * n..(i + 1) * n];
            for k in 0..n {
                next[k] = decay[k] * prev[k];
            }
            let block = &self.coef[i * self.block..(i + 1) * self.block];
            let mut start = 0;
            for (j, (offset, support)) in self.layout.iter().enumerate() {
                if support.is_empty() {
                    continue;
                }
                let m = support.len() + 1;
                xi.clear();
                xi.push(T::lit(noise.get(i, j)));
                let comp = &companions[i * width + start..i * width + start + support.len()];
                xi.extend(comp.iter().map(|&v| T::lit(v)));
                start += support.len();
                for (c, &k) in support.iter().enumerate() {
                    let row = &block[offset + c * m..offset + (c + 1) * m];
                    let mut inc = T::zero();
                    for (r, x) in row.iter().zip(&xi) {
                        inc += *r * *x;
                    }
                    next[k] += inc;
                }
            }
        }
    }
}

/// `Q_h(t)_kl = G_kl (1 - e^{-(lambda_k + lambda_l) t}) / (lambda_k + lambda_l)`.
pub fn discrete_covariance<T: Real>(g: &DMatrix<T>, eigvals: &[T], t: T) -> DMatrix<T> {
    DMatrix::from_fn(g.nrows(), g.ncols(), |k, l| g[(k, l)] * T::decay_integral(eigvals[k] + eigvals[l], t))
}

/// Gains of the discrete bridge with observation covariance `eps I`:
/// `Q_h(t_i) e^{-Lambda_h (T - t_i)} (Q_h(T) + eps I)^{-1}`.
#[derive(Debug, Clone)]
pub struct FemBridge<T: Real> {
    eps: T,
    eigvals: Vec<T>,
    points: Vec<T>,
    gains: Vec<DMatrix<T>>,
    complement_root: DMatrix<T>,
}

impl<T: Real> FemBridge<T> {
    pub fn new(
        sys: &FemSystem<T>,
        coupling: &FemCoupling<T>,
        model: &SpectralModel<T>,
        eps: T,
        grid: &TimeGrid<T>,
    ) -> Result<Self> {
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!("observation scale eps must be positive, got {eps}")));
        }
        if model.modes() != coupling.modes() {
            return Err(Error::DimensionMismatch {
                what: "reference modes",
                expected: coupling.modes(),
                got: model.modes(),
            });
        }
        grid.check_horizon(model.horizon())?;
        let n = sys.n_dof();
        let end = model.horizon();
        let lam = sys.eigvals();
        let g = coupling.noise_covariance(model.mu());
        let mut total = discrete_covariance(&g, lam, end);
        for k in 0..n {
            total[(k, k)] += eps;
        }
        let chol =
            Cholesky::new(total).ok_or_else(|| Error::Numerical("Q_h(T) + eps I is not positive definite".into()))?;
        let gains = grid
            .points()
            .iter()
            .map(|&t| {
                let mut dq = discrete_covariance(&g, lam, t);
                for (k, mut row) in dq.row_iter_mut().enumerate() {
                    row *= (-(lam[k] * (end - t))).exp();
                }
                chol.solve(&dq).transpose()
            })
            .collect();
        let ww = coupling.w() * coupling.w().transpose();
        let defect = DMatrix::<T>::identity(n, n) - ww;
        let eig = SymmetricEigen::new((&defect + defect.transpose()) * T::lit(0.5));
        let root = eig.eigenvalues.map(|v| v.max(T::zero()).sqrt());
        let complement_root = &eig.eigenvectors * DMatrix::from_diagonal(&root) * eig.eigenvectors.transpose();
        Ok(Self { eps, eigvals: lam.to_vec(), points: grid.points().to_vec(), gains, complement_root })
    }

    pub fn eps(&self) -> T {
        self.eps
    }

    pub fn gain(&self, point: usize) -> &DMatrix<T> {
        &self.gains[point]
    }

    /// Modal coordinates of `P_h Z` for one sample: `W z + sqrt(eps) R xi'`
    /// with `z` the reference observation noise and `R = (I - W W^T)^{1/2}`,
    /// so the covariance is exactly `eps I`.
    pub fn observation_noise(&self, coupling: &FemCoupling<T>, z: &[T], seed: u64, sample: u64) -> DVector<T> {
        let n = coupling.n_dof();
        let mut stream = rng::substream(seed, rng::STREAM_Z_COMPLEMENT, sample, 0);
        let xi = DVector::from_iterator(n, (0..n).map(|_| T::lit(rng::standard_normal(&mut stream))));
        coupling.project(z) + &self.complement_root * xi * self.eps.sqrt()
    }

    /// Reference observation noise `z_j = sqrt(eps) xi_j` on the `Z` stream.
    pub fn reference_noise(&self, modes: usize, seed: u64, sample: u64) -> Vec<T> {
        let scale = self.eps.sqrt();
        let mut stream = rng::substream(seed, rng::STREAM_Z, sample, 0);
        (0..modes).map(|_| scale * T::lit(rng::standard_normal(&mut stream))).collect()
    }

    /// `d(t_i) -= Gain_i (d(T) + zeta - W y)` in place on a modal path.
    pub fn condition_modal(&self, path: &mut [T], zeta: &DVector<T>, wy: &DVector<T>) {
        let n = zeta.len();
        let last = (self.points.len() - 1) * n;
        let innovation = DVector::from_iterator(n, (0..n).map(|k| path[last + k] + zeta[k] - wy[k]));
        for (i, gain) in self.gains.iter().enumerate() {
            let corr = gain * &innovation;
            for k in 0..n {
                path[i * n + k] -= corr[k];
            }
        }
    }

    /// Modal mean `e^{-Lambda t} d0 + Gain(t) (W y - e^{-Lambda T} d0)`,
    /// `grid points x n_dof`.
    pub fn mean(&self, d0: &DVector<T>, wy: &DVector<T>) -> DMatrix<T> {
        let n = d0.len();
        let end = *self.points.last().expect("grid has points");
        let decayed = DVector::from_iterator(n, (0..n).map(|k| (-(self.eigvals[k] * end)).exp() * d0[k]));
        let innovation = wy - decayed;
        let mut out = DMatrix::zeros(self.points.len(), n);
        for (i, &t) in self.points.iter().enumerate() {
            let corr = &self.gains[i] * &innovation;
            for k in 0..n {
                out[(i, k)] = (-(self.eigvals[k] * t)).exp() * d0[k] + corr[k];
            }
        }
        out
    }
}

fn nodal_ensemble<T: Real>(sys: &FemSystem<T>, grid: &TimeGrid<T>, modal: Vec<Vec<T>>, seed: u64) -> PathEnsemble<T> {
    let n = sys.n_dof();
    let paths = modal
        .into_par_iter()
        .map(|p| {
            let d = DMatrix::from_row_slice(grid.len(), n, &p);
            let c = d * sys.eigvecs().transpose();
            let mut out = Vec::with_capacity(p.len());
            for row in c.row_iter() {
                out.extend(row.iter().copied());
            }
            out
        })
        .collect();
    PathEnsemble::from_paths(grid.clone(), n, paths, seed, Frame::Nodal)
}

/// Samples the finite element solution driven by the projection of the
/// reference noise of `model`; `x` holds sine coefficients. Output is nodal.
pub fn sample_forward_fem<T: Real>(
    sys: &FemSystem<T>,
    model: &SpectralModel<T>,
    x: &[T],
    grid: &TimeGrid<T>,
    n_samples: usize,
    seed: u64,
) -> Result<PathEnsemble<T>> {
    check_len("initial value", x, model.modes())?;
    let coupling = FemCoupling::new(sys, model.modes())?;
    let kernel = FemKernel::new(sys, &coupling, model, grid)?;
    let d0: Vec<T> = coupling.project(x).iter().copied().collect();
    let len = grid.len() * sys.n_dof();
    let modal: Vec<Vec<T>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let noise = DrivingNoise::draw(seed, s as u64, model.modes(), grid.len() - 1);
            let mut p = vec![T::zero(); len];
            kernel.fill_modal(&d0, &noise, seed, s as u64, &mut p);
            p
        })
        .collect();
    Ok(nodal_ensemble(sys, grid, modal, seed))
}

/// Samples the discrete bridge with observation covariance `eps I`. The
/// observation-noise spectrum of `model` is not used; only `eps` is.
pub fn sample_bridge_fem<T: Real>(
    sys: &FemSystem<T>,
    model: &SpectralModel<T>,
    target: &BridgeTarget<T>,
    eps: T,
    grid: &TimeGrid<T>,
    n_samples: usize,
    seed: u64,
) -> Result<PathEnsemble<T>> {
    check_len("initial value", &target.x, model.modes())?;
    check_len("conditioning value", &target.y, model.modes())?;
    let coupling = FemCoupling::new(sys, model.modes())?;
    let kernel = FemKernel::new(sys, &coupling, model, grid)?;
    let bridge = FemBridge::new(sys, &coupling, model, eps, grid)?;
    let d0: Vec<T> = coupling.project(&target.x).iter().copied().collect();
    let wy = coupling.project(&target.y);
    let len = grid.len() * sys.n_dof();
    let modal: Vec<Vec<T>> = (0..n_samples)
        .into_par_iter()
        .map(|s| {
            let s = s as u64;
            let noise = DrivingNoise::draw(seed, s, model.modes(), grid.len() - 1);
            let mut p = vec![T::zero(); len];
            kernel.fill_modal(&d0, &noise, seed, s, &mut p);
            let z = bridge.reference_noise(model.modes(), seed, s);
            let zeta = bridge.observation_noise(&coupling, &z, seed, s);
            bridge.condition_modal(&mut p, &zeta, &wy);
            p
        })
        .collect();
    Ok(nodal_ensemble(sys, grid, modal, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::gain;
    use crate::forward::tests::ks_two_sample;
    use crate::model::{build_model, CovarianceSpec, ObservationSpec};
    use crate::oracle::{condition, integrate, CoordKind, JointGaussian, Label};

    fn white(modes: usize, eps: f64) -> SpectralModel<f64> {
        build_model(CovarianceSpec::White, ObservationSpec::scaled_identity(eps), modes, 1.0).unwrap()
    }

    fn e(j: usize) -> impl Fn(f64) -> f64 {
        move |x| 2f64.sqrt() * (j as f64 * PI * x).sin()
    }

    #[test]
    fn two_cells_by_hand() {
        let sys = assemble(0.5f64).unwrap();
        assert_eq!(sys.n_dof(), 1);
        assert!((sys.mass()[(0, 0)] - 1.0 / 3.0).abs() < 1e-15);
        assert!((sys.stiffness()[(0, 0)] - 4.0).abs() < 1e-15);
        assert!((sys.eigvals()[0] - 12.0).abs() < 1e-12);
        assert!((discrete_eigenvalue(0.5f64, 1) - 12.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_widths() {
        assert!(assemble(0.3f64).is_err());
        assert!(assemble(1.0f64).is_err());
        assert!(assemble(0.0f64).is_err());
        assert!(assemble(-0.25f64).is_err());
        assert_eq!(FemMesh::uniform(0.125f64).unwrap().n_dof(), 7);
    }

    #[test]
    fn eigenvalues_match_closed_form() {
        let h = 1.0f64 / 16.0;
        let sys = assemble(h).unwrap();
        for (k, &l) in sys.eigvals().iter().enumerate() {
            let exact = discrete_eigenvalue(h, k + 1);
            assert!((l - exact).abs() <= 1e-9 * exact, "k = {}", k + 1);
        }
    }

    #[test]
    fn discrete_eigenvalues_dominate_and_converge() {
        let mut prev = f64::INFINITY;
        for cells in [4usize, 8, 16, 32, 64] {
            let sys = assemble(1.0 / cells as f64).unwrap();
            for (k, &l) in sys.eigvals().iter().enumerate() {
                assert!(l >= (PI * (k + 1) as f64).powi(2) * (1.0 - 1e-12));
            }
            let first = sys.eigvals()[0];
            assert!(first < prev && first > PI * PI);
            prev = first;
        }
        assert!((prev - PI * PI) / (PI * PI) < 1e-3);
    }

    #[test]
    fn system_invariants() {
        let sys = assemble(1.0f64 / 32.0).unwrap();
        let m = sys.mass();
        let k = sys.stiffness();
        assert!((m - m.transpose()).amax() <= 1e-14 * m.amax());
        assert!((k - k.transpose()).amax() <= 1e-14 * k.amax());
        let psi = sys.eigvecs();
        let gram = psi.transpose() * m * psi;
        assert!((gram - DMatrix::identity(31, 31)).amax() < 1e-10);
        assert!(sys.eigvals().windows(2).all(|w| w[0] <= w[1]));
        assert!(sys.eigvals()[0] > 0.0);
        let resid = k * psi - m * psi * DMatrix::from_diagonal(&DVector::from_column_slice(sys.eigvals()));
        assert!(resid.amax() < 1e-8 * sys.eigvals()[30]);
    }

    #[test]
    fn sine_inner_matches_quadrature() {
        let mesh = FemMesh::uniform(1.0f64 / 8.0).unwrap();
        for j in [1usize, 3, 8, 13, 40] {
            let b = sine_inner(&mesh, j);
            for (i, &xi) in mesh.nodes().iter().enumerate() {
                let hat = |x: f64| (1.0 - (x - xi).abs() / mesh.h()).max(0.0);
                let f = e(j);
                let left = integrate(|x: f64| hat(x) * f(x), xi - mesh.h(), xi, 1e-13).unwrap();
                let right = integrate(|x: f64| hat(x) * f(x), xi, xi + mesh.h(), 1e-13).unwrap();
                assert!((b[i] - (left + right)).abs() < 1e-13, "j = {j}, i = {i}");
            }
        }
    }

    #[test]
    fn projection_reproduces_finite_element_functions() {
        let sys = assemble(1.0f64 / 16.0).unwrap();
        let c = DVector::from_fn(15, |i, _| ((i * 7 % 5) as f64 - 2.0) * 0.3);
        let f = |x: f64| sys.evaluate(c.as_slice(), x);
        let p = project_l2(FemInput::Function(&f), &sys).unwrap();
        assert!((&p - &c).amax() < 1e-12);
    }

    #[test]
    fn projection_annihilates_orthogonal_complement() {
        let sys = assemble(1.0f64 / 8.0).unwrap();
        let f = e(3);
        let p = project_l2(FemInput::Function(&f), &sys).unwrap();
        let g = |x: f64| f(x) - sys.evaluate(p.as_slice(), x);
        let q = project_l2(FemInput::Function(&g), &sys).unwrap();
        assert!(q.amax() < 1e-10);
    }

    #[test]
    fn projection_is_idempotent() {
        let sys = assemble(1.0f64 / 16.0).unwrap();
        let coeffs: Vec<f64> = (1..=64).map(|j| 1.0 / j as f64).collect();
        let once = project_l2(FemInput::Coefficients(&coeffs), &sys).unwrap();
        let u = |x: f64| sys.evaluate(once.as_slice(), x);
        let twice = project_l2(FemInput::Function(&u), &sys).unwrap();
        assert!((&once - &twice).amax() < 1e-12);
    }

    #[test]
    fn coefficient_and_function_inputs_agree() {
        let sys = assemble(1.0f64 / 32.0).unwrap();
        let a = project_l2(FemInput::Coefficients(&[0.0, 0.0, 1.0]), &sys).unwrap();
        let f = e(3);
        let b = project_l2(FemInput::Function(&f), &sys).unwrap();
        assert!((a - b).amax() < 1e-4);
    }

    #[test]
    fn projection_rejects_nan() {
        let sys = assemble(0.25f64).unwrap();
        let f = |x: f64| if x > 0.5 { f64::NAN } else { x };
        assert!(project_l2(FemInput::Function(&f), &sys).is_err());
    }

    fn slope(xs: &[f64], ys: &[f64]) -> f64 {
        let n = xs.len() as f64;
        let lx: Vec<f64> = xs.iter().map(|x| x.ln()).collect();
        let ly: Vec<f64> = ys.iter().map(|y| y.ln()).collect();
        let mx = lx.iter().sum::<f64>() / n;
        let my = ly.iter().sum::<f64>() / n;
        let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
        let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
        sxy / sxx
    }

    #[test]
    fn projection_error_is_second_order() {
        let hs = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0];
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| {
                let sys = assemble(h).unwrap();
                let c = project_l2(FemInput::Coefficients(&[1.0]), &sys).unwrap();
                l2_distance_fn(&sys, c.as_slice(), e(1))
            })
            .collect();
        let order = slope(&hs, &errs);
        assert!((order - 2.0).abs() < 0.1, "order {order}");
    }

    #[test]
    fn semigroup_basics() {
        let sys = assemble(1.0f64 / 16.0).unwrap();
        let c = DVector::from_fn(15, |i, _| (i as f64 * 0.37).cos());
        assert!((semigroup_h(0.0, &c, &sys).unwrap() - &c).amax() < 1e-12);
        let k = 4;
        let psi = sys.eigvecs().column(k).into_owned();
        let t = 0.003;
        let moved = semigroup_h(t, &psi, &sys).unwrap();
        assert!((moved - &psi * (-sys.eigvals()[k] * t).exp()).amax() < 1e-12);
        let m_norm = |v: &DVector<f64>| (v.transpose() * sys.mass() * v)[(0, 0)].sqrt();
        for &t in &[0.0, 1e-4, 0.01, 1.0] {
            assert!(m_norm(&semigroup_h(t, &c, &sys).unwrap()) <= m_norm(&c) * (1.0 + 1e-12));
        }
        assert!(semigroup_h(-1.0, &c, &sys).is_err());
    }

    #[test]
    fn semigroup_error_is_second_order() {
        let t = 0.1;
        let hs = [1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0];
        let exact = move |x: f64| (-PI * PI * t).exp() * e(1)(x);
        let errs: Vec<f64> = hs
            .iter()
            .map(|&h| {
                let sys = assemble(h).unwrap();
                let c = project_l2(FemInput::Coefficients(&[1.0]), &sys).unwrap();
                let moved = semigroup_h(t, &c, &sys).unwrap();
                l2_distance_fn(&sys, moved.as_slice(), exact)
            })
            .collect();
        let order = slope(&hs, &errs);
        assert!((1.7..=2.2).contains(&order), "order {order}");
    }

    #[test]
    fn coupling_structure() {
        let sys = assemble(1.0f64 / 8.0).unwrap();
        assert!(FemCoupling::new(&sys, 27).is_err());
        let cp = FemCoupling::new(&sys, 64).unwrap();
        for j in 0..64 {
            assert!(cp.support(j).len() <= 1, "aliasing gives one discrete mode per sine");
        }
        assert!(cp.support(7).is_empty() && cp.support(15).is_empty());
        let ww = cp.w() * cp.w().transpose();
        let ev = SymmetricEigen::new(ww).eigenvalues;
        assert!(ev.max() <= 1.0 + 1e-12);
        let g = cp.noise_covariance(&vec![1.0; 64]);
        assert!((&g - g.transpose()).amax() < 1e-15);
    }

    #[test]
    fn distance_matches_quadrature() {
        let sys = assemble(1.0f64 / 8.0).unwrap();
        let cp = FemCoupling::new(&sys, 32).unwrap();
        let a: Vec<f64> = (1..=32).map(|j| (j as f64).sin() / j as f64).collect();
        let d: Vec<f64> = (0..7).map(|k| 0.2 * k as f64 - 0.5).collect();
        let c = sys.to_nodal(&DVector::from_vec(d.clone()));
        let f = |x: f64| a.iter().enumerate().map(|(j, v)| v * e(j + 1)(x)).sum::<f64>();
        // Piecewise smooth integrand: refine the quadrature on a finer mesh.
        let mut acc = 0.0;
        let cells = 8;
        for cell in 0..cells {
            let lo = cell as f64 / cells as f64;
            let hi = lo + 1.0 / cells as f64;
            acc += integrate(|x: f64| (sys.evaluate(c.as_slice(), x) - f(x)).powi(2), lo, hi, 1e-12).unwrap();
        }
        let exact = cp.l2_distance_sq(&a, &d);
        assert!((exact - acc).abs() < 1e-10 * acc, "{exact} vs {acc}");
        assert!((cp.sine_coefficients(&d).len()) == 32);
    }

    #[test]
    fn noise_free_paths_follow_discrete_semigroup() {
        let modes = 32;
        let lambda = crate::model::dirichlet_eigenvalues::<f64>(modes);
        let model = SpectralModel::from_spectra(lambda, vec![0.0; modes], vec![1.0; modes], 1.0, -0.5).unwrap();
        let sys = assemble(1.0f64 / 8.0).unwrap();
        let grid = TimeGrid::uniform(5, 1.0).unwrap();
        let x: Vec<f64> = (1..=modes).map(|j| 1.0 / (j * j) as f64).collect();
        let ens = sample_forward_fem(&sys, &model, &x, &grid, 2, 3).unwrap();
        let c0 = project_l2(FemInput::Coefficients(&x), &sys).unwrap();
        for (i, &t) in grid.points().iter().enumerate() {
            let expect = semigroup_h(t, &c0, &sys).unwrap();
            for k in 0..7 {
                assert!((ens.get(1, i, k) - expect[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn modal_variance_matches_formula() {
        let sys = assemble(0.125f64).unwrap();
        let model = white(32, 1.0);
        let grid = TimeGrid::uniform(3, 1.0).unwrap();
        let n = 20_000;
        let ens = sample_forward_fem(&sys, &model, &[0.0; 32], &grid, n, 5).unwrap();
        let cp = FemCoupling::new(&sys, 32).unwrap();
        let g = cp.noise_covariance(model.mu());
        let q = discrete_covariance(&g, sys.eigvals(), 0.5);
        for k in 0..7 {
            let vals: Vec<f64> = (0..n)
                .map(|s| {
                    let c = DVector::from_fn(7, |i, _| ens.get(s, 1, i));
                    sys.to_modal(&c)[k]
                })
                .collect();
            let var = vals.iter().map(|v| v * v).sum::<f64>() / n as f64;
            let sd = q[(k, k)] * (2.0 / n as f64).sqrt();
            assert!((var - q[(k, k)]).abs() < 4.0 * sd, "k = {k}: {var} vs {}", q[(k, k)]);
        }
    }

    #[test]
    fn forward_runs_are_reproducible() {
        let sys = assemble(0.25f64).unwrap();
        let model = white(16, 1.0);
        let grid = TimeGrid::uniform(4, 1.0).unwrap();
        let a = sample_forward_fem(&sys, &model, &[0.0; 16], &grid, 7, 11).unwrap();
        let b = sample_forward_fem(&sys, &model, &[0.0; 16], &grid, 3, 11).unwrap();
        assert_eq!(a.path(2), b.path(2));
        let c = sample_forward_fem(&sys, &model, &[0.0; 16], &grid, 3, 12).unwrap();
        assert_ne!(a.path(0), c.path(0));
    }

    #[test]
    fn discrete_covariance_is_psd() {
        let sys = assemble(1.0f64 / 16.0).unwrap();
        let cp = FemCoupling::new(&sys, 64).unwrap();
        let model =
            build_model(CovarianceSpec::Power { s: 0.5, scale: 1.0 }, ObservationSpec::scaled_identity(1.0), 64, 1.0)
                .unwrap();
        let g = cp.noise_covariance(model.mu());
        for &t in &[0.0, 0.01, 0.3, 1.0] {
            let q = discrete_covariance(&g, sys.eigvals(), t);
            assert!((&q - q.transpose()).amax() <= 1e-12 * q.amax().max(1e-300));
            let ev = SymmetricEigen::new(q.clone()).eigenvalues;
            assert!(ev.min() >= -1e-12 * q.trace().abs());
        }
    }

    #[test]
    fn single_dof_bridge_is_scalar() {
        let sys = assemble(0.5f64).unwrap();
        let model = white(4, 1.0);
        let grid = TimeGrid::uniform(9, 1.0).unwrap();
        let cp = FemCoupling::new(&sys, 4).unwrap();
        let eps = 0.3;
        let br = FemBridge::new(&sys, &cp, &model, eps, &grid).unwrap();
        let g = cp.noise_covariance(model.mu())[(0, 0)];
        let scalar = SpectralModel::from_spectra(vec![sys.eigvals()[0]], vec![g], vec![eps], 1.0, 0.0).unwrap();
        for (i, &t) in grid.points().iter().enumerate() {
            let k = gain(0, t, &scalar).unwrap();
            assert!((br.gain(i)[(0, 0)] - k).abs() <= 1e-13 * k.abs().max(1e-300));
        }
    }

    #[test]
    fn bridge_mean_matches_schur_oracle() {
        let sys = assemble(0.25f64).unwrap();
        let modes = 16;
        let model = white(modes, 1.0);
        let grid = TimeGrid::uniform(5, 1.0).unwrap();
        let cp = FemCoupling::new(&sys, modes).unwrap();
        let eps = 0.5;
        let br = FemBridge::new(&sys, &cp, &model, eps, &grid).unwrap();
        let x: Vec<f64> = (1..=modes).map(|j| 1.0 / j as f64).collect();
        let y: Vec<f64> = (1..=modes).map(|j| (-1f64).powi(j as i32) * 0.5 / j as f64).collect();
        let d0 = cp.project(&x);
        let wy = cp.project(&y);
        let mean = br.mean(&d0, &wy);

        let g = cp.noise_covariance(model.mu());
        let lam = sys.eigvals();
        let n = 3;
        let pts = grid.points();
        let m = pts.len();
        let q = |s: f64, k: usize, l: usize| -> f64 {
            let rate = lam[k] + lam[l];
            g[(k, l)] * integrate(|u: f64| (-rate * u).exp(), 0.0, s, 1e-13).unwrap()
        };
        // Coordinates: d_k(t_i) for i, k, then d_k(T) + zeta_k.
        let dim = m * n + n;
        let cov_state = |a: usize, b: usize| -> f64 {
            let (i, k) = (a / n, a % n);
            let (i2, l) = (b / n, b % n);
            let (s, t) = (pts[i], pts[i2]);
            if s <= t {
                q(s, k, l) * (-lam[l] * (t - s)).exp()
            } else {
                q(t, k, l) * (-lam[k] * (s - t)).exp()
            }
        };
        let mut cov = DMatrix::zeros(dim, dim);
        let mut mu = DVector::zeros(dim);
        for a in 0..m * n {
            mu[a] = (-lam[a % n] * pts[a / n]).exp() * d0[a % n];
            for b in 0..m * n {
                cov[(a, b)] = cov_state(a, b);
            }
        }
        for k in 0..n {
            let o = m * n + k;
            let last = (m - 1) * n + k;
            mu[o] = mu[last];
            for b in 0..m * n {
                cov[(o, b)] = cov[(last, b)];
                cov[(b, o)] = cov[(b, last)];
            }
            for l in 0..n {
                cov[(o, m * n + l)] = cov[(last, (m - 1) * n + l)];
            }
            cov[(o, o)] += eps;
        }
        let labels = vec![Label { kind: CoordKind::State, time: 0.0, index: 0 }; dim];
        let joint = JointGaussian::new(mu, cov, labels).unwrap();
        let obs: Vec<usize> = (m * n..dim).collect();
        let post = condition(&joint, &obs, wy.as_slice()).unwrap();
        for i in 0..m {
            for k in 0..n {
                let o = post.mean[i * n + k];
                let v = mean[(i, k)];
                assert!((o - v).abs() <= 1e-8 * o.abs().max(1e-12), "({i},{k}): {o} vs {v}");
            }
        }
    }

    #[test]
    fn projected_observation_noise_is_white() {
        let sys = assemble(0.25f64).unwrap();
        let model = white(12, 2.0);
        let grid = TimeGrid::uniform(2, 1.0).unwrap();
        let cp = FemCoupling::new(&sys, 12).unwrap();
        let br = FemBridge::new(&sys, &cp, &model, 2.0, &grid).unwrap();
        let n = 100_000;
        let mut acc = DMatrix::<f64>::zeros(3, 3);
        for s in 0..n {
            let z = br.reference_noise(12, 4, s);
            let zeta = br.observation_noise(&cp, &z, 4, s);
            acc += &zeta * zeta.transpose();
        }
        acc /= n as f64;
        for a in 0..3 {
            for b in 0..3 {
                let target = if a == b { 2.0 } else { 0.0 };
                let sd = if a == b { 2.0 * (2.0 / n as f64).sqrt() } else { 2.0 / (n as f64).sqrt() };
                assert!((acc[(a, b)] - target).abs() < 4.0 * sd, "({a},{b}) {}", acc[(a, b)]);
            }
        }
    }

    #[test]
    fn weak_observation_leaves_forward_law() {
        let sys = assemble(0.25f64).unwrap();
        let model = white(16, 1.0);
        let grid = TimeGrid::uniform(3, 1.0).unwrap();
        let n = 100_000;
        let target = BridgeTarget::new(vec![0.0; 16], vec![0.3; 16], 2.0).unwrap();
        let bridge = sample_bridge_fem(&sys, &model, &target, 1e6, &grid, n, 8).unwrap();
        let forward = sample_forward_fem(&sys, &model, &[0.0; 16], &grid, n, 9).unwrap();
        for k in 0..3 {
            let a: Vec<f64> = (0..n).map(|s| bridge.get(s, 2, k)).collect();
            let b: Vec<f64> = (0..n).map(|s| forward.get(s, 2, k)).collect();
            let ks = ks_two_sample(&a, &b);
            assert!(ks < 1e-2, "node {k}: {ks}");
        }
    }

    #[test]
    fn rejects_invalid_bridge_inputs() {
        let sys = assemble(0.25f64).unwrap();
        let model = white(16, 1.0);
        let grid = TimeGrid::uniform(3, 1.0).unwrap();
        let cp = FemCoupling::new(&sys, 16).unwrap();
        assert!(FemBridge::new(&sys, &cp, &model, 0.0, &grid).is_err());
        assert!(FemBridge::new(&sys, &cp, &model, -1.0, &grid).is_err());
        let other = white(20, 1.0);
        assert!(FemBridge::new(&sys, &cp, &other, 1.0, &grid).is_err());
        let lambda: Vec<f64> = (1..=16).map(|j| j as f64).collect();
        let custom = SpectralModel::from_spectra(lambda, vec![1.0; 16], vec![1.0; 16], 1.0, 0.0).unwrap();
        assert!(sample_forward_fem(&sys, &custom, &[0.0; 16], &grid, 1, 0).is_err());
    }

    #[test]
    fn nodal_export_and_sidecar() {
        let sys = assemble(0.25f64).unwrap();
        let model = white(12, 1.0);
        let grid = TimeGrid::uniform(3, 1.0).unwrap();
        let ens = sample_forward_fem(&sys, &model, &[0.0; 12], &grid, 2, 1).unwrap();
        let mut csv = Vec::new();
        ens.write_csv(&mut csv).unwrap();
        let text = String::from_utf8(csv).unwrap();
        assert!(text.starts_with("sample,t,node_1,node_2,node_3\n"));
        assert_eq!(text.lines().count(), 1 + 2 * 3);
        let mut side = Vec::new();
        sys.mesh().write_sidecar(&mut side).unwrap();
        let v: serde_json::Value = serde_json::from_slice(&side).unwrap();
        assert_eq!(v["h"], 0.25);
        assert_eq!(v["nodes"].as_array().unwrap().len(), 3);
    }

    #[test]
    fn works_in_single_precision() {
        let sys = assemble(0.125f32).unwrap();
        for (k, &l) in sys.eigvals().iter().enumerate() {
            let exact = discrete_eigenvalue(0.125f32, k + 1);
            assert!((l - exact).abs() <= 1e-4 * exact);
        }
    }
}
