//! One function per subcommand. Each validates first and returns before any
//! computation under `--dry-run`.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use bridgesim::bridge::{denominator, sample_bridge, truncate_bridge};
use bridgesim::fem::{assemble, sample_bridge_fem, FemMesh, MODES_PER_DOF};
use bridgesim::forward::{sample_forward, Frame, TimeGrid};
use bridgesim::harness::{run_fem_study, run_spectral_study, ConvergenceReport};
use bridgesim::model::check_assumptions;
use bridgesim::oracle::oracle_report;
use bridgesim::PathEnsemble;
use serde::Serialize;
use serde_json::json;

use crate::config::{Format, RunConfig};
use crate::error::CliError;

/// Resolved invocation shared by all subcommands.
pub struct Run {
    pub config: RunConfig,
    pub out: Option<PathBuf>,
    pub dry_run: bool,
}

impl Run {
    fn format(&self, default: Format) -> Format {
        self.config.output.format.unwrap_or(default)
    }

    fn dry(&self, what: &str) -> bool {
        if self.dry_run {
            eprintln!("{what}: configuration valid");
        }
        self.dry_run
    }
}

fn write_to(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut f = BufWriter::new(
        File::create(path).map_err(|e| CliError::Config(format!("cannot create {}: {e}", path.display())))?,
    );
    f.write_all(bytes)?;
    f.flush()?;
    Ok(())
}

/// Writes to `path`, or to stdout without one.
fn emit(path: Option<&Path>, bytes: &[u8]) -> Result<(), CliError> {
    match path {
        Some(p) => write_to(p, bytes),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(bytes)?;
            out.flush()?;
            Ok(())
        }
    }
}

fn pretty<S: Serialize>(value: &S) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("serializable");
    s.push('\n');
    s.into_bytes()
}

/// `<stem>.<suffix>` next to `path`.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    path.with_extension(suffix)
}

fn ensemble_bytes(ens: &PathEnsemble, format: Format) -> Result<Vec<u8>, CliError> {
    match format {
        Format::Csv => {
            let mut buf = Vec::new();
            ens.write_csv(&mut buf)?;
            Ok(buf)
        }
        Format::Json => {
            let paths: Vec<Vec<Vec<f64>>> = (0..ens.n_samples())
                .map(|s| (0..ens.grid().len()).map(|i| (0..ens.width()).map(|k| ens.get(s, i, k)).collect()).collect())
                .collect();
            let frame = match ens.frame() {
                Frame::Spectral => "spectral",
                Frame::Nodal => "nodal",
            };
            Ok(pretty(&json!({ "frame": frame, "seed": ens.seed(), "t": ens.grid().points(), "paths": paths })))
        }
    }
}

fn ensure_finite(ens: &PathEnsemble) -> Result<(), CliError> {
    if ens.is_finite() {
        Ok(())
    } else {
        Err(CliError::Numerical("sampled paths contain non-finite values".into()))
    }
}

pub fn sample_forward_cmd(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let model = c.model()?;
    let target = c.target(model.modes())?;
    let grid = c.sampling_grid()?;
    if run.dry("sample-forward") {
        return Ok(());
    }
    let ens = sample_forward(&model, &target.x, &grid, c.sampling.samples, c.seed)?;
    ensure_finite(&ens)?;
    emit(run.out.as_deref(), &ensemble_bytes(&ens, run.format(Format::Csv))?)
}

fn bridge_sidecar(path: Option<&Path>, pinned: bool, modes: usize, y: &[f64], seed: u64) -> Result<(), CliError> {
    if let Some(p) = path {
        let side = json!({ "pinned": pinned, "N": modes, "target_y": y, "seed": seed });
        write_to(&sibling(p, "bridge.json"), &pretty(&side))?;
    }
    Ok(())
}

pub fn sample_bridge_cmd(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let model = c.model()?;
    let target = c.target(model.modes())?;
    let grid = c.sampling_grid()?;
    for j in 0..model.modes() {
        denominator(j, &model)?;
    }
    if run.dry("sample-bridge") {
        return Ok(());
    }
    let ens = sample_bridge(&model, &target, &grid, c.sampling.samples, c.seed)?;
    ensure_finite(&ens)?;
    let out = run.out.as_deref();
    emit(out, &ensemble_bytes(&ens, run.format(Format::Csv))?)?;
    let pinned = model.mu_tilde().iter().all(|&m| m == 0.0);
    bridge_sidecar(out, pinned, model.modes(), &target.y, c.seed)
}

pub fn sample_fem_bridge_cmd(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let model = c.model_with(c.fem.eps)?;
    let target = c.target(model.modes())?;
    let grid = c.sampling_grid()?;
    let mesh = FemMesh::<f64>::uniform(c.fem.h)?;
    if model.modes() < MODES_PER_DOF * mesh.n_dof() {
        return Err(CliError::Config(format!(
            "J = {} below {MODES_PER_DOF} x n_dof = {} for h = {}",
            model.modes(),
            MODES_PER_DOF * mesh.n_dof(),
            c.fem.h
        )));
    }
    if c.fem.eps <= 0.0 || !c.fem.eps.is_finite() {
        return Err(CliError::Config(format!("fem.eps must be positive, got {}", c.fem.eps)));
    }
    if run.dry("sample-fem-bridge") {
        return Ok(());
    }
    let sys = assemble(c.fem.h)?;
    let ens = sample_bridge_fem(&sys, &model, &target, c.fem.eps, &grid, c.sampling.samples, c.seed)?;
    ensure_finite(&ens)?;
    let out = run.out.as_deref();
    emit(out, &ensemble_bytes(&ens, run.format(Format::Csv))?)?;
    if let Some(p) = out {
        let mut buf = Vec::new();
        sys.mesh().write_sidecar(&mut buf)?;
        buf.push(b'\n');
        write_to(&sibling(p, "mesh.json"), &buf)?;
    }
    bridge_sidecar(out, false, model.modes(), &target.y, c.seed)
}

/// Writes the report in the configured format and, with an output path, the
/// other format as a companion file.
fn emit_report(run: &Run, report: &ConvergenceReport) -> Result<(), CliError> {
    let json = report.to_json().into_bytes();
    let mut csv = Vec::new();
    report.write_csv(&mut csv)?;
    let format = run.format(Format::Json);
    let (main, companion, ext) = match format {
        Format::Json => (json, csv, "csv"),
        Format::Csv => (csv, json, "json"),
    };
    emit(run.out.as_deref(), &main)?;
    if let Some(p) = &run.out {
        write_to(&sibling(p, ext), &companion)?;
    }
    Ok(())
}

pub fn converge_spectral_cmd(run: &Run) -> Result<(), CliError> {
    let study = run.config.spectral_study()?;
    if run.dry("converge-spectral") {
        return Ok(());
    }
    emit_report(run, &run_spectral_study(&study)?)
}

pub fn converge_fem_cmd(run: &Run) -> Result<(), CliError> {
    let study = run.config.fem_study()?;
    if run.dry("converge-fem") {
        return Ok(());
    }
    emit_report(run, &run_fem_study(&study)?)
}

pub fn oracle_check_cmd(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let full = c.model()?;
    let n = c.oracle.modes;
    if n == 0 || n > full.modes() {
        return Err(CliError::Config(format!("oracle.modes must lie in [1, {}]", full.modes())));
    }
    if c.oracle.tolerance.is_nan() || c.oracle.tolerance <= 0.0 {
        return Err(CliError::Config(format!("oracle.tolerance must be positive, got {}", c.oracle.tolerance)));
    }
    let model = truncate_bridge(&full, n)?;
    let target = c.target(full.modes())?.truncate(n);
    let grid = TimeGrid::uniform(c.oracle.grid_points, c.model.horizon)?;
    if run.dry("oracle-check") {
        return Ok(());
    }
    let report = oracle_report(&model, &target, &grid, c.oracle.tolerance)?;
    emit(run.out.as_deref(), &pretty(&report))?;
    if report.passed {
        Ok(())
    } else {
        Err(CliError::Numerical(format!(
            "oracle deviation {:e} exceeds tolerance {:e}",
            report.max_rel_deviation, c.oracle.tolerance
        )))
    }
}

pub fn check_assumptions_cmd(run: &Run) -> Result<(), CliError> {
    let c = &run.config;
    let model = c.model()?;
    let target = c.target(model.modes())?;
    if run.dry("check-assumptions") {
        return Ok(());
    }
    let budget = check_assumptions(&model, target.chi);
    for d in &budget.diagnostics {
        eprintln!("warning: {d}");
    }
    let bytes = pretty(&budget);
    if let Some(p) = &run.out {
        write_to(p, &bytes)?;
    }
    emit(None, &bytes)
}
