//! Spectral problem data for the stochastic heat equation on `(0, 1)` with
//! homogeneous Dirichlet conditions.
//!
//! Operators are diagonal in the sine eigenbasis `e_j(x) = sqrt(2) sin(j pi x)`:
//! `A e_j = lambda_j e_j`, `Q e_j = mu_j e_j` and `Q~ e_j = mu~_j e_j`.

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Margin added to the Hilbert-Schmidt embedding exponent of the 1D Laplacian.
pub const ZETA_MARGIN: f64 = 1e-3;

/// Hilbert-Schmidt embedding exponent `zeta` (any value above one half works in 1D).
pub const ZETA: f64 = 0.5 + ZETA_MARGIN;

/// Spectrum of the noise covariance `Q`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CovarianceSpec<T> {
    /// `mu_j = 1`: space-time white noise.
    White,
    /// `mu_j = scale * lambda_j^(-s)`.
    Power { s: T, scale: T },
}

/// Spectrum of the observation noise covariance `Q~`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ObservationKind<T> {
    /// `mu~_j = eps`.
    ScaledIdentity { eps: T },
    /// `mu~_j = eps * lambda_j^(-a)`.
    Power { eps: T, a: T },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObservationSpec<T> {
    pub kind: ObservationKind<T>,
    /// Exponent of the observation space `H^eta`. Bookkeeping only.
    pub eta: T,
}

impl<T: Real> CovarianceSpec<T> {
    pub fn validate(&self) -> Result<()> {
        match *self {
            CovarianceSpec::White => Ok(()),
            CovarianceSpec::Power { s, scale } => {
                if !(s >= T::zero()) {
                    return Err(Error::InvalidParameter(format!("power covariance needs s >= 0, got {s}")));
                }
                if !(scale > T::zero()) || !scale.is_finite() {
                    return Err(Error::InvalidParameter(format!("power covariance needs scale > 0, got {scale}")));
                }
                Ok(())
            }
        }
    }

    pub fn eigenvalue(&self, lambda: T) -> T {
        match *self {
            CovarianceSpec::White => T::one(),
            CovarianceSpec::Power { s, scale } => scale * lambda.powf(-s),
        }
    }
}

impl<T: Real> ObservationSpec<T> {
    pub fn scaled_identity(eps: T) -> Self {
        Self { kind: ObservationKind::ScaledIdentity { eps }, eta: -T::lit(ZETA) }
    }

    pub fn validate(&self) -> Result<()> {
        let (eps, a) = match self.kind {
            ObservationKind::ScaledIdentity { eps } => (eps, T::zero()),
            ObservationKind::Power { eps, a } => (eps, a),
        };
        if !(eps > T::zero()) || !eps.is_finite() {
            return Err(Error::InvalidParameter(format!("observation noise needs eps > 0, got {eps}")));
        }
        if !(a >= T::zero()) {
            return Err(Error::InvalidParameter(format!("observation power needs a >= 0, got {a}")));
        }
        if !self.eta.is_finite() {
            return Err(Error::InvalidParameter("eta must be finite".into()));
        }
        Ok(())
    }

    /// Exponent `alpha` with `inf_j lambda_j^alpha mu~_j > 0`.
    pub fn alpha(&self) -> T {
        match self.kind {
            ObservationKind::ScaledIdentity { .. } => T::zero(),
            ObservationKind::Power { a, .. } => a,
        }
    }

    pub fn eigenvalue(&self, lambda: T) -> T {
        match self.kind {
            ObservationKind::ScaledIdentity { eps } => eps,
            ObservationKind::Power { eps, a } => eps * lambda.powf(-a),
        }
    }
}

/// Truncated spectral description of the linear SPDE and its observation.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralModel<T> {
    lambda: Vec<T>,
    mu: Vec<T>,
    mu_tilde: Vec<T>,
    horizon: T,
    eta: T,
    families: Option<(CovarianceSpec<T>, ObservationKind<T>)>,
}

/// `lambda_j = (pi j)^2`, `j = 1..=modes`.
pub fn dirichlet_eigenvalues<T: Real>(modes: usize) -> Vec<T> {
    (1..=modes)
        .map(|j| {
            let w = T::pi() * T::from_count(j);
            w * w
        })
        .collect()
}

/// Builds the model for the Dirichlet Laplacian with `modes` retained eigenpairs.
pub fn build_model<T: Real>(
    covariance: CovarianceSpec<T>,
    observation: ObservationSpec<T>,
    modes: usize,
    horizon: T,
) -> Result<SpectralModel<T>> {
    if modes == 0 {
        return Err(Error::InvalidParameter("at least one mode is required".into()));
    }
    if !(horizon > T::zero()) || !horizon.is_finite() {
        return Err(Error::InvalidParameter(format!("terminal time must be positive, got {horizon}")));
    }
    covariance.validate()?;
    observation.validate()?;
    let lambda = dirichlet_eigenvalues::<T>(modes);
    let mu = lambda.iter().map(|&l| covariance.eigenvalue(l)).collect();
    let mu_tilde = lambda.iter().map(|&l| observation.eigenvalue(l)).collect();
    Ok(SpectralModel {
        lambda,
        mu,
        mu_tilde,
        horizon,
        eta: observation.eta,
        families: Some((covariance, observation.kind)),
    })
}

impl<T: Real> SpectralModel<T> {
    /// Model from arbitrary diagonal spectra.
    pub fn from_spectra(lambda: Vec<T>, mu: Vec<T>, mu_tilde: Vec<T>, horizon: T, eta: T) -> Result<Self> {
        let n = lambda.len();
        if n == 0 {
            return Err(Error::InvalidParameter("at least one mode is required".into()));
        }
        if mu.len() != n {
            return Err(Error::DimensionMismatch { what: "mu", expected: n, got: mu.len() });
        }
        if mu_tilde.len() != n {
            return Err(Error::DimensionMismatch { what: "mu_tilde", expected: n, got: mu_tilde.len() });
        }
        if !(horizon > T::zero()) || !horizon.is_finite() {
            return Err(Error::InvalidParameter(format!("terminal time must be positive, got {horizon}")));
        }
        if !eta.is_finite() {
            return Err(Error::InvalidParameter("eta must be finite".into()));
        }
        for (j, &l) in lambda.iter().enumerate() {
            if !(l > T::zero()) || !l.is_finite() {
                return Err(Error::InvalidParameter(format!("lambda[{j}] = {l} is not positive")));
            }
            if j > 0 && l < lambda[j - 1] {
                return Err(Error::InvalidParameter(format!("lambda decreases at index {j}")));
            }
        }
        for (name, v) in [("mu", &mu), ("mu_tilde", &mu_tilde)] {
            if let Some((j, x)) = v.iter().enumerate().find(|(_, x)| !(**x >= T::zero()) || !x.is_finite()) {
                return Err(Error::InvalidParameter(format!("{name}[{j}] = {x} is not a nonnegative number")));
            }
        }
        Ok(Self { lambda, mu, mu_tilde, horizon, eta, families: None })
    }

    pub fn modes(&self) -> usize {
        self.lambda.len()
    }

    pub fn lambda(&self) -> &[T] {
        &self.lambda
    }

    pub fn mu(&self) -> &[T] {
        &self.mu
    }

    pub fn mu_tilde(&self) -> &[T] {
        &self.mu_tilde
    }

    /// Terminal time `T`.
    pub fn horizon(&self) -> T {
        self.horizon
    }

    pub fn eta(&self) -> T {
        self.eta
    }

    pub fn families(&self) -> Option<(CovarianceSpec<T>, ObservationKind<T>)> {
        self.families
    }

    /// Same spectra with a different observation-space exponent.
    pub fn with_eta(&self, eta: T) -> Self {
        Self { eta, ..self.clone() }
    }

    /// Same operator and noise with the observation noise switched off.
    pub fn without_observation_noise(&self) -> Self {
        Self { mu_tilde: vec![T::zero(); self.modes()], families: None, ..self.clone() }
    }

    /// First `n` modes.
    pub(crate) fn restrict(&self, n: usize) -> Self {
        Self {
            lambda: self.lambda[..n].to_vec(),
            mu: self.mu[..n].to_vec(),
            mu_tilde: self.mu_tilde[..n].to_vec(),
            ..self.clone()
        }
    }
}

/// Extended real serialized as a number, or `"inf"` / `"-inf"`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct Extended(pub f64);

impl Serialize for Extended {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_finite() {
            s.serialize_f64(self.0)
        } else if self.0 > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }
}

/// Admissible regularity exponents for a model.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityBudget {
    /// Supremum of `beta` with `A^((beta-1)/2) Q^(1/2)` Hilbert-Schmidt.
    pub beta_sup: Extended,
    /// Supremum of `rho` with `int_0^T |A^(rho/2) S(T-t) Q^(1/2)|^2 dt` finite.
    pub rho_sup: Extended,
    pub alpha: Extended,
    pub zeta: f64,
    pub chi: f64,
    /// `min(rho_sup - alpha, beta_sup, chi)`.
    pub rate_sup: Extended,
    /// `"analytic"` for the built-in families, `"probe"` for fitted spectra.
    pub method: &'static str,
    pub diagnostics: Vec<String>,
}

impl RegularityBudget {
    pub fn hypothesis_holds(&self) -> bool {
        self.alpha.0 < self.rho_sup.0
    }
}

/// Evaluates the standing regularity assumptions for `model` with an initial
/// value of smoothness `chi`.
pub fn check_assumptions<T: Real>(model: &SpectralModel<T>, chi: f64) -> RegularityBudget {
    let (beta_sup, rho_sup, alpha, method) = match model.families {
        Some((cov, obs)) => {
            let s = match cov {
                CovarianceSpec::White => 0.0,
                CovarianceSpec::Power { s, .. } => s.as_f64(),
            };
            let alpha = match obs {
                ObservationKind::ScaledIdentity { .. } => 0.0,
                ObservationKind::Power { a, .. } => a.as_f64(),
            };
            (0.5 + s, 1.0 + s, alpha, "analytic")
        }
        None => {
            let (b, r, a) = probe_exponents(model);
            (b, r, a, "probe")
        }
    };
    let rate_sup = (rho_sup - alpha).min(beta_sup).min(chi);
    let mut diagnostics = Vec::new();
    if alpha >= rho_sup {
        diagnostics.push(format!(
            "alpha = {alpha} >= rho_sup = {rho_sup}: the hypothesis alpha < rho of the spectral rate fails"
        ));
    }
    if rate_sup <= 0.0 {
        diagnostics.push(format!("no positive convergence rate is admissible (rate_sup = {rate_sup})"));
    }
    if !(chi > 0.0) {
        diagnostics.push(format!("initial value smoothness chi = {chi} must be positive"));
    }
    RegularityBudget {
        beta_sup: Extended(beta_sup),
        rho_sup: Extended(rho_sup),
        alpha: Extended(alpha),
        zeta: ZETA,
        chi,
        rate_sup: Extended(rate_sup),
        method,
        diagnostics,
    }
}

/// Least-squares slope of `ys` against `xs`.
fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

/// Power-law fit on the upper half of the retained modes.
///
/// With `lambda_j ~ j^gamma` and `mu_j ~ lambda_j^(-s)`, the sum
/// `sum_j lambda_j^(beta-1) mu_j` converges iff `beta < 1 + s - 1/gamma` and
/// `sup_j lambda_j^(rho-1) mu_j` is finite iff `rho <= 1 + s`. A spectrum that
/// vanishes in the fitted window counts as infinitely smooth. Fewer than four
/// modes cannot be fitted and yield zero exponents.
fn probe_exponents<T: Real>(model: &SpectralModel<T>) -> (f64, f64, f64) {
    let n = model.modes();
    if n < 4 {
        return (0.0, 0.0, f64::INFINITY);
    }
    let lo = n / 2;
    let ln_j: Vec<f64> = (lo..n).map(|j| ((j + 1) as f64).ln()).collect();
    let ln_l: Vec<f64> = model.lambda[lo..].iter().map(|l| l.as_f64().ln()).collect();
    let gamma = slope(&ln_j, &ln_l);
    let decay = |v: &[T]| -> f64 {
        if v.iter().any(|x| *x <= T::zero()) {
            f64::INFINITY
        } else {
            let ln_v: Vec<f64> = v.iter().map(|x| x.as_f64().ln()).collect();
            -slope(&ln_l, &ln_v)
        }
    };
    let s = decay(&model.mu[lo..]);
    let a = decay(&model.mu_tilde[lo..]).max(0.0);
    if s.is_infinite() {
        (f64::INFINITY, f64::INFINITY, a)
    } else {
        (1.0 + s - 1.0 / gamma, 1.0 + s, a)
    }
}

/// Norm in `H^r`: `(sum_j lambda_j^r c_j^2)^(1/2)`.
pub fn hdot_norm<T: Real>(coeffs: &[T], lambda: &[T], r: T) -> T {
    assert_eq!(coeffs.len(), lambda.len(), "coefficients and eigenvalues differ in length");
    coeffs.iter().zip(lambda).map(|(&c, &l)| l.powf(r) * c * c).fold(T::zero(), |a, b| a + b).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn white(modes: usize) -> SpectralModel<f64> {
        build_model(CovarianceSpec::White, ObservationSpec::scaled_identity(1.0), modes, 1.0).unwrap()
    }

    #[test]
    fn white_single_mode() {
        let m = white(1);
        assert_eq!(m.lambda(), &[PI * PI]);
        assert_eq!(m.mu(), &[1.0]);
        assert_eq!(m.mu_tilde(), &[1.0]);
    }

    #[test]
    fn power_covariance_is_inverse_eigenvalue() {
        let m =
            build_model(CovarianceSpec::Power { s: 1.0, scale: 1.0 }, ObservationSpec::scaled_identity(1.0), 2, 1.0)
                .unwrap();
        assert!((m.mu()[0] - PI.powi(-2)).abs() < 1e-15);
        assert!((m.mu()[1] - (2.0 * PI).powi(-2)).abs() < 1e-15);
    }

    #[test]
    fn dirichlet_eigenvalues_are_squares() {
        let m = white(3);
        for (j, l) in m.lambda().iter().enumerate() {
            assert_eq!(*l, (PI * (j + 1) as f64).powi(2));
        }
    }

    #[test]
    fn rejects_bad_input() {
        let obs = ObservationSpec::scaled_identity(1.0);
        assert!(build_model(CovarianceSpec::White, obs, 0, 1.0).is_err());
        assert!(build_model(CovarianceSpec::White, obs, 3, 0.0).is_err());
        assert!(build_model(CovarianceSpec::White, obs, 3, -1.0).is_err());
        assert!(build_model(CovarianceSpec::Power { s: -0.1, scale: 1.0 }, obs, 3, 1.0).is_err());
        assert!(build_model(CovarianceSpec::Power { s: 1.0, scale: 0.0 }, obs, 3, 1.0).is_err());
        let bad_obs = ObservationSpec { kind: ObservationKind::ScaledIdentity { eps: 0.0 }, eta: 0.0 };
        assert!(build_model(CovarianceSpec::White, bad_obs, 3, 1.0).is_err());
        let bad_a = ObservationSpec { kind: ObservationKind::Power { eps: 1.0, a: -1.0 }, eta: 0.0 };
        assert!(build_model(CovarianceSpec::White, bad_a, 3, 1.0).is_err());
        assert!(SpectralModel::from_spectra(vec![2.0, 1.0], vec![1.0; 2], vec![1.0; 2], 1.0, 0.0).is_err());
        assert!(SpectralModel::from_spectra(vec![1.0, 2.0], vec![1.0, -1.0], vec![1.0; 2], 1.0, 0.0).is_err());
        assert!(SpectralModel::from_spectra(vec![1.0, 2.0], vec![1.0], vec![1.0; 2], 1.0, 0.0).is_err());
    }

    #[test]
    fn budget_white_scaled_identity() {
        let b = check_assumptions(&white(8), 2.0);
        assert_eq!(b.beta_sup.0, 0.5);
        assert_eq!(b.rho_sup.0, 1.0);
        assert_eq!(b.alpha.0, 0.0);
        assert_eq!(b.rate_sup.0, 0.5);
        assert!(b.diagnostics.is_empty());
        assert!(b.hypothesis_holds());
    }

    #[test]
    fn budget_power_covariance() {
        let m =
            build_model(CovarianceSpec::Power { s: 1.0, scale: 1.0 }, ObservationSpec::scaled_identity(1.0), 8, 1.0)
                .unwrap();
        let b = check_assumptions(&m, 2.0);
        assert_eq!(b.beta_sup.0, 1.5);
        assert_eq!(b.rho_sup.0, 2.0);
        assert_eq!(b.rate_sup.0, 1.5);
    }

    /// Decade increments of `sum_j lambda_j^(beta-1) mu_j` for `mu_j = lambda_j^-1`
    /// shrink below `beta = 1.5` and grow above it.
    #[test]
    fn summability_oracle_power_one() {
        let partial = |beta: f64, from: usize, to: usize| -> f64 {
            (from + 1..=to).map(|j| (PI * j as f64).powi(2).powf(beta - 2.0)).sum()
        };
        let ratio = |beta: f64| partial(beta, 100_000, 1_000_000) / partial(beta, 10_000, 100_000);
        let beta_sup = 1.5;
        assert!(ratio(beta_sup - 0.1) < 0.7);
        assert!(ratio(beta_sup + 0.1) > 1.4);
        assert!(ratio(beta_sup - 0.3) < ratio(beta_sup - 0.1));
    }

    #[test]
    fn budget_diagnostic_when_alpha_too_large() {
        let obs = ObservationSpec { kind: ObservationKind::Power { eps: 1.0, a: 2.0 }, eta: 0.0 };
        let m = build_model(CovarianceSpec::White, obs, 4, 1.0).unwrap();
        let b = check_assumptions(&m, 2.0);
        assert_eq!(b.rate_sup.0, -1.0);
        assert!(!b.hypothesis_holds());
        assert!(!b.diagnostics.is_empty());
    }

    #[test]
    fn probe_recovers_power_families() {
        let lambda = dirichlet_eigenvalues::<f64>(4096);
        let mu: Vec<f64> = lambda.iter().map(|l| l.powf(-1.0)).collect();
        let mu_t: Vec<f64> = lambda.iter().map(|l| 0.5 * l.powf(-0.25)).collect();
        let m = SpectralModel::from_spectra(lambda, mu, mu_t, 1.0, 0.0).unwrap();
        let b = check_assumptions(&m, 4.0);
        assert_eq!(b.method, "probe");
        assert!((b.beta_sup.0 - 1.5).abs() < 1e-9);
        assert!((b.rho_sup.0 - 2.0).abs() < 1e-9);
        assert!((b.alpha.0 - 0.25).abs() < 1e-9);
        let dead =
            SpectralModel::from_spectra(vec![1.0, 2.0, 3.0, 4.0], vec![1.0, 1.0, 0.0, 0.0], vec![1.0; 4], 1.0, 0.0)
                .unwrap();
        let b = check_assumptions(&dead, 1.0);
        assert!(b.beta_sup.0.is_infinite());
        assert_eq!(serde_json::to_value(&b).unwrap()["beta_sup"], "inf");
    }

    #[test]
    fn hdot_norm_examples() {
        let lambda = vec![PI * PI, 4.0 * PI * PI];
        assert!((hdot_norm(&[1.0, 0.0], &lambda, 1.5) - (PI * PI).powf(0.75)).abs() < 1e-12);
        assert_eq!(hdot_norm(&[3.0, 4.0], &lambda, 0.0), 5.0);
        let v = hdot_norm(&[1.0, 1.0], &lambda, -2.0);
        let oracle = (PI.powi(-4) + (2.0 * PI).powi(-4)).sqrt();
        assert!((v - oracle).abs() < 1e-15 * oracle.max(1.0));
        assert_eq!(hdot_norm::<f64>(&[], &[], 1.0), 0.0);
    }

    proptest! {
        #[test]
        fn hdot_isometry(c in prop::collection::vec(-10.0f64..10.0, 1..12), r in -3.0f64..3.0) {
            let lambda = dirichlet_eigenvalues::<f64>(c.len());
            let shifted: Vec<f64> = c.iter().zip(&lambda).map(|(c, l)| l.powf(r / 2.0) * c).collect();
            let a = hdot_norm(&c, &lambda, r);
            let b = hdot_norm(&shifted, &lambda, 0.0);
            prop_assert!((a - b).abs() <= 1e-12 * a.max(1e-300));
        }

        #[test]
        fn hdot_embedding(c in prop::collection::vec(-10.0f64..10.0, 1..12), s in -3.0f64..3.0, d in 0.0f64..3.0) {
            let lambda = dirichlet_eigenvalues::<f64>(c.len());
            let r = s + d;
            let lhs = hdot_norm(&c, &lambda, s);
            let rhs = lambda[0].powf((s - r) / 2.0) * hdot_norm(&c, &lambda, r);
            prop_assert!(lhs <= rhs * (1.0 + 1e-12));
        }

        #[test]
        fn budget_monotone_in_s(s1 in 0.0f64..3.0, ds in 0.0f64..3.0) {
            let obs = ObservationSpec::scaled_identity(1.0);
            let m1 = build_model(CovarianceSpec::Power { s: s1, scale: 1.0 }, obs, 4, 1.0).unwrap();
            let m2 = build_model(CovarianceSpec::Power { s: s1 + ds, scale: 1.0 }, obs, 4, 1.0).unwrap();
            let b1 = check_assumptions(&m1, 1.0);
            let b2 = check_assumptions(&m2, 1.0);
            prop_assert!(b2.beta_sup.0 >= b1.beta_sup.0);
            prop_assert!(b2.rho_sup.0 >= b1.rho_sup.0);
            prop_assert!(b1.beta_sup.0 <= b1.rho_sup.0);
        }
    }
}
