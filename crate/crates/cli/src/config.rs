//! TOML run configuration. Every table rejects unknown keys.

use std::path::{Path, PathBuf};

use bridgesim::bridge::BridgeTarget;
use bridgesim::forward::TimeGrid;
use bridgesim::harness::{ErrorNorm, FemStudy, SpectralStudy, StudyMode};
use bridgesim::model::{build_model, CovarianceSpec, ObservationKind, ObservationSpec, SpectralModel};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Optional; when present it must name the subcommand being run.
    pub command: Option<String>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub q: QSection,
    pub qtilde: Option<QTildeSection>,
    #[serde(default)]
    pub initial: InitialSection,
    #[serde(default)]
    pub sampling: SamplingSection,
    #[serde(default)]
    pub fem: FemSection,
    #[serde(default)]
    pub study: StudySection,
    #[serde(default)]
    pub oracle: OracleSection,
    #[serde(default)]
    pub output: OutputSection,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(rename = "J", default = "default_modes")]
    pub modes: usize,
    #[serde(rename = "T", default = "one")]
    pub horizon: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { modes: default_modes(), horizon: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QKind {
    #[default]
    White,
    Power,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QSection {
    #[serde(default)]
    pub kind: QKind,
    pub s: Option<f64>,
    #[serde(default = "one")]
    pub scale: f64,
}

impl Default for QSection {
    fn default() -> Self {
        Self { kind: QKind::White, s: None, scale: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QTildeKind {
    #[default]
    ScaledIdentity,
    Power,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QTildeSection {
    #[serde(default)]
    pub kind: QTildeKind,
    #[serde(default = "one")]
    pub eps: f64,
    pub a: Option<f64>,
    #[serde(default)]
    pub eta: f64,
}

/// Sine coefficients of the initial value and of the conditioning value;
/// missing trailing coefficients are zero.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialSection {
    #[serde(default)]
    pub x: Vec<f64>,
    #[serde(default)]
    pub y: Vec<f64>,
    /// Smoothness of `x`; enters the regularity budget only.
    pub chi: Option<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingSection {
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for SamplingSection {
    fn default() -> Self {
        Self { samples: default_samples(), grid_points: default_grid_points() }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FemSection {
    /// Mesh width of `sample-fem-bridge`.
    #[serde(default = "default_h")]
    pub h: f64,
    /// Observation noise scale; the discrete bridge observes through `eps I`.
    #[serde(default = "one")]
    pub eps: f64,
    /// Strictly decreasing mesh widths of `converge-fem`.
    #[serde(default = "default_fem_levels")]
    pub levels: Vec<f64>,
    #[serde(default)]
    pub forward_only: bool,
}

impl Default for FemSection {
    fn default() -> Self {
        Self { h: default_h(), eps: 1.0, levels: default_fem_levels(), forward_only: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModeChoice {
    #[default]
    Exact,
    MonteCarlo,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormChoice {
    #[default]
    Pointwise,
    SupPath,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    /// Truncation levels `N` of `converge-spectral`.
    #[serde(default = "default_spectral_levels")]
    pub levels: Vec<usize>,
    #[serde(default)]
    pub mode: ModeChoice,
    #[serde(default)]
    pub unconditioned: bool,
    #[serde(default = "default_study_samples")]
    pub samples: usize,
    #[serde(default = "two")]
    pub p: f64,
    #[serde(default)]
    pub norm: NormChoice,
    #[serde(default = "default_grid_points")]
    pub grid_points: usize,
}

impl Default for StudySection {
    fn default() -> Self {
        Self {
            levels: default_spectral_levels(),
            mode: ModeChoice::Exact,
            unconditioned: false,
            samples: default_study_samples(),
            p: 2.0,
            norm: NormChoice::Pointwise,
            grid_points: default_grid_points(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleSection {
    /// Largest accepted relative deviation; exceeding it exits with code 3.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    #[serde(default = "default_oracle_grid_points")]
    pub grid_points: usize,
    /// The dense oracle runs on the truncation to this many modes.
    #[serde(default = "default_oracle_modes")]
    pub modes: usize,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self {
            tolerance: default_tolerance(),
            grid_points: default_oracle_grid_points(),
            modes: default_oracle_modes(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    Csv,
    Json,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    pub path: Option<PathBuf>,
    pub format: Option<Format>,
}

fn one() -> f64 {
    1.0
}

fn two() -> f64 {
    2.0
}

fn default_modes() -> usize {
    2048
}

fn default_samples() -> usize {
    100
}

fn default_study_samples() -> usize {
    10_000
}

fn default_grid_points() -> usize {
    65
}

fn default_oracle_grid_points() -> usize {
    9
}

fn default_oracle_modes() -> usize {
    6
}

fn default_h() -> f64 {
    1.0 / 16.0
}

fn default_fem_levels() -> Vec<f64> {
    vec![1.0 / 8.0, 1.0 / 16.0, 1.0 / 32.0, 1.0 / 64.0, 1.0 / 128.0]
}

fn default_spectral_levels() -> Vec<usize> {
    vec![4, 8, 16, 32, 64, 128, 256]
}

fn default_tolerance() -> f64 {
    1e-8
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Rejects a `command` key that names a different subcommand.
    pub fn check_command(&self, command: &str) -> Result<(), CliError> {
        match &self.command {
            Some(c) if c != command => {
                Err(CliError::Config(format!("config is for `{c}` but `{command}` was requested")))
            }
            _ => Ok(()),
        }
    }

    fn observation(&self, fallback_eps: f64) -> Result<ObservationSpec<f64>, CliError> {
        let Some(q) = &self.qtilde else {
            return Ok(ObservationSpec::scaled_identity(fallback_eps));
        };
        let kind = match q.kind {
            QTildeKind::ScaledIdentity => {
                if q.a.is_some() {
                    return Err(CliError::Config("qtilde.a applies to kind = \"power\" only".into()));
                }
                ObservationKind::ScaledIdentity { eps: q.eps }
            }
            QTildeKind::Power => {
                let a = q.a.ok_or_else(|| CliError::Config("qtilde.a is required for kind = \"power\"".into()))?;
                ObservationKind::Power { eps: q.eps, a }
            }
        };
        Ok(ObservationSpec { kind, eta: q.eta })
    }

    fn covariance(&self) -> Result<CovarianceSpec<f64>, CliError> {
        match self.q.kind {
            QKind::White => {
                if self.q.s.is_some() {
                    return Err(CliError::Config("q.s applies to kind = \"power\" only".into()));
                }
                Ok(CovarianceSpec::White)
            }
            QKind::Power => {
                let s = self.q.s.ok_or_else(|| CliError::Config("q.s is required for kind = \"power\"".into()))?;
                Ok(CovarianceSpec::Power { s, scale: self.q.scale })
            }
        }
    }

    /// Spectral model; without a `[qtilde]` table the observation noise is
    /// `ScaledIdentity(fallback_eps)`. A scaled identity with `eps = 0`
    /// switches the observation noise off (pinned bridge).
    pub fn model_with(&self, fallback_eps: f64) -> Result<SpectralModel<f64>, CliError> {
        if self.pinned() {
            let q = self.qtilde.as_ref().expect("pinned implies [qtilde]");
            let spec = ObservationSpec { kind: ObservationKind::ScaledIdentity { eps: 1.0 }, eta: q.eta };
            let model = build_model(self.covariance()?, spec, self.model.modes, self.model.horizon)?;
            return Ok(model.without_observation_noise());
        }
        Ok(build_model(self.covariance()?, self.observation(fallback_eps)?, self.model.modes, self.model.horizon)?)
    }

    pub fn pinned(&self) -> bool {
        matches!(&self.qtilde, Some(q) if q.kind == QTildeKind::ScaledIdentity && q.eps == 0.0 && q.a.is_none())
    }

    pub fn model(&self) -> Result<SpectralModel<f64>, CliError> {
        self.model_with(1.0)
    }

    pub fn target(&self, modes: usize) -> Result<BridgeTarget<f64>, CliError> {
        let pad = |v: &[f64], what: &str| -> Result<Vec<f64>, CliError> {
            if v.len() > modes {
                return Err(CliError::Config(format!("initial.{what} has {} entries but J = {modes}", v.len())));
            }
            let mut out = v.to_vec();
            out.resize(modes, 0.0);
            Ok(out)
        };
        let chi = self.initial.chi.unwrap_or(BridgeTarget::<f64>::zero(0).chi);
        Ok(BridgeTarget::new(pad(&self.initial.x, "x")?, pad(&self.initial.y, "y")?, chi)?)
    }

    pub fn sampling_grid(&self) -> Result<TimeGrid<f64>, CliError> {
        Ok(TimeGrid::uniform(self.sampling.grid_points, self.model.horizon)?)
    }

    pub fn spectral_study(&self) -> Result<SpectralStudy, CliError> {
        let model = self.model()?;
        let target = self.target(model.modes())?;
        let study = SpectralStudy {
            grid: TimeGrid::uniform(self.study.grid_points, self.model.horizon)?,
            target,
            levels: self.study.levels.clone(),
            mode: match self.study.mode {
                ModeChoice::Exact => StudyMode::Exact,
                ModeChoice::MonteCarlo => StudyMode::MonteCarlo,
            },
            unconditioned: self.study.unconditioned,
            n_samples: match self.study.mode {
                ModeChoice::Exact => 0,
                ModeChoice::MonteCarlo => self.study.samples,
            },
            p: self.study.p,
            norm: self.norm(),
            seed: self.seed,
            model,
        };
        study.validate()?;
        Ok(study)
    }

    pub fn fem_study(&self) -> Result<FemStudy, CliError> {
        let model = self.model_with(self.fem.eps)?;
        let target = self.target(model.modes())?;
        let study = FemStudy {
            grid: TimeGrid::uniform(self.study.grid_points, self.model.horizon)?,
            target,
            levels: self.fem.levels.clone(),
            eps: self.fem.eps,
            forward_only: self.fem.forward_only,
            n_samples: self.study.samples,
            p: self.study.p,
            norm: self.norm(),
            seed: self.seed,
            model,
        };
        study.validate()?;
        Ok(study)
    }

    fn norm(&self) -> ErrorNorm {
        match self.study.norm {
            NormChoice::Pointwise => ErrorNorm::Pointwise,
            NormChoice::SupPath => ErrorNorm::SupPath,
        }
    }
}
