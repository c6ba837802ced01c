//! Experiment configuration: a TOML document with one table per stage.
//!
//! Every table and key is optional and falls back to the defaults below;
//! unknown keys are rejected. `--override section.key=value` edits the
//! parsed document before it is typed, so overrides go through the same
//! validation as the file.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sheat_core::analysis::{IntegralResolution, Z_95};
use sheat_core::kernel::{Boundary, CalibrationGrid, KernelSpec};
use sheat_core::noise::GridSpec;
use sheat_core::oracle::OracleConfig;
use sheat_core::regularity::GrrParams;
use sheat_core::solver::{InitialData, ModelParams, PathConfig, Scheme, Sigma};
use sheat_core::stats::Functional;

use crate::error::{RunError, RunResult};

/// Environment variable consulted for the master seed.
pub const SEED_ENV: &str = "SHEAT_SEED";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub model: ModelSection,
    pub grid: GridSection,
    pub run: RunSection,
    pub moments: MomentsSection,
    pub oracle: OracleSection,
    pub analysis: AnalysisSection,
    pub kernel: KernelSection,
    pub grr: GrrSection,
    pub bounds: BoundsSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub nu: f64,
    pub lambda: f64,
    /// λ grid for sweeps and scans; empty means `[lambda]`.
    pub lambdas: Vec<f64>,
    pub boundary: Boundary,
    pub sigma: Sigma,
    pub initial: InitialData,
    pub scheme: Scheme,
    pub n_modes: Option<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            nu: 0.5,
            lambda: 1.0,
            lambdas: Vec::new(),
            boundary: Boundary::Dirichlet,
            sigma: Sigma::Linear { k: 1.0 },
            initial: InitialData::Bump { margin: 0.2 },
            scheme: Scheme::SemiImplicit,
            n_modes: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub n_interior: usize,
    pub dt: f64,
    pub horizon: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { n_interior: 127, dt: 1e-4, horizon: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub n_samples: u64,
    pub master_seed: u64,
    /// Empty means 16 equally spaced times up to the horizon.
    pub observation_times: Vec<f64>,
    /// Worker threads; never affects results.
    pub workers: Option<usize>,
    /// Trajectories written by `simulate`.
    pub saved_paths: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { n_samples: 1000, master_seed: 0, observation_times: Vec::new(), workers: None, saved_paths: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FunctionalKind {
    Pointwise,
    Sup,
    Lp,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MomentsSection {
    pub p: Vec<f64>,
    pub functionals: Vec<FunctionalKind>,
    /// Probe position of the pointwise functional.
    pub probe_x: f64,
}

impl Default for MomentsSection {
    fn default() -> Self {
        Self { p: vec![2.0], functionals: vec![FunctionalKind::Lp, FunctionalKind::Pointwise], probe_x: 0.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OracleSection {
    pub time_panels: usize,
    pub space_nodes: usize,
    pub estimate_error: bool,
    /// Horizon of oracle solves; defaults to the grid horizon.
    pub horizon: Option<f64>,
}

impl Default for OracleSection {
    fn default() -> Self {
        Self { time_panels: 200, space_nodes: 63, estimate_error: true, horizon: None }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    Oracle,
    MonteCarlo,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisSection {
    pub backend: Backend,
    /// Rates are fitted over the last `fit_fraction` of the time range.
    pub fit_fraction: f64,
    pub z: f64,
    /// Interior margin γ of the lower-bound envelope.
    pub margin: f64,
    /// Time at which energies enter the excitation fit.
    pub excitation_time: f64,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self { backend: Backend::Oracle, fit_fraction: 0.5, z: Z_95, margin: 0.2, excitation_time: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelSection {
    pub tolerance: f64,
    /// Times and positions of the kernel table.
    pub table_times: Vec<f64>,
    pub table_positions: Vec<f64>,
    /// Lower-bound calibration grid: log-spaced t, positions in [γ, 1−γ].
    pub margin: f64,
    pub t_range: (f64, f64),
    pub t_nodes: usize,
    pub x_nodes: usize,
    /// Time range of the derivative-bound fit.
    pub dx_t_range: (f64, f64),
}

impl Default for KernelSection {
    fn default() -> Self {
        Self {
            tolerance: 1e-12,
            table_times: vec![1e-4, 1e-3, 1e-2, 0.1, 1.0],
            table_positions: (0..=10).map(|i| i as f64 / 10.0).collect(),
            margin: 0.2,
            t_range: (1e-4, 10.0),
            t_nodes: 25,
            x_nodes: 13,
            dx_t_range: (1e-3, 1.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GrrSection {
    pub p: f64,
    pub delta: f64,
    pub epsilon: f64,
    pub n_paths: u64,
}

impl Default for GrrSection {
    fn default() -> Self {
        let s = GrrParams::standard();
        Self { p: s.p(), delta: s.delta(), epsilon: s.epsilon(), n_paths: 100 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundsSection {
    pub alpha: f64,
    pub negative_betas: Vec<f64>,
    /// Distances below the threshold (2−α)νπ², relative to it.
    pub threshold_gaps: Vec<f64>,
    pub t_max_negative: f64,
    pub t_max_threshold: f64,
    pub x_points: usize,
    pub levels: usize,
}

impl Default for BoundsSection {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            negative_betas: vec![-1.0, -0.25, -1.0 / 16.0],
            threshold_gaps: vec![0.1, 0.025, 0.00625],
            t_max_negative: 20.0,
            t_max_threshold: 400.0,
            x_points: 5,
            levels: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

fn config_err(msg: impl std::fmt::Display) -> RunError {
    RunError::Config(msg.to_string())
}

/// Applies `section.key=value`; the value is parsed as a TOML value and
/// falls back to a bare string.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> RunResult<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| config_err(format!("override `{assignment}` is not key=value")))?;
    let keys: Vec<&str> = path.trim().split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(config_err(format!("override key `{path}` has an empty segment")));
    }
    let value = parse_value(raw.trim());
    let (last, parents) = keys.split_last().expect("split yields at least one segment");
    let mut table = doc;
    for key in parents {
        let entry = table.entry(key.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| config_err(format!("override `{path}`: `{key}` is not a table")))?;
    }
    table.insert(last.to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str, overrides: &[String]) -> RunResult<Self> {
        let mut doc: toml::Table = text.parse().map_err(config_err)?;
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc).try_into().map_err(config_err)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> RunResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml_string(&self) -> RunResult<String> {
        toml::to_string(self).map_err(config_err)
    }

    /// Checks every section by building the objects the commands use.
    pub fn validate(&self) -> RunResult<()> {
        for &lambda in &self.lambdas() {
            let params = self.model_params(lambda)?;
            params.validate()?;
        }
        if self.run.n_samples == 0 {
            return Err(config_err("run.n_samples must be positive"));
        }
        let times = self.observation_times();
        if times.iter().any(|&t| !(t > 0.0 && t <= self.grid.horizon * (1.0 + 1e-12))) {
            return Err(config_err("observation times must lie in (0, horizon]"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(config_err("observation times must increase strictly"));
        }
        if self.run.workers == Some(0) {
            return Err(config_err("run.workers must be positive"));
        }
        if self.moments.p.is_empty() || self.moments.functionals.is_empty() {
            return Err(config_err("moments.p and moments.functionals must be non-empty"));
        }
        for f in self.functionals() {
            f.validate()?;
        }
        if !(self.analysis.fit_fraction > 0.0 && self.analysis.fit_fraction <= 1.0) {
            return Err(config_err("analysis.fit_fraction must lie in (0, 1]"));
        }
        if !(self.analysis.z > 0.0) {
            return Err(config_err("analysis.z must be positive"));
        }
        if !(self.analysis.margin > 0.0 && self.analysis.margin < 0.25) {
            return Err(config_err("analysis.margin must lie in (0, 1/4)"));
        }
        self.kernel_spec(self.model.boundary)?;
        self.grr_params()?;
        if !(self.bounds.alpha > 0.0 && self.bounds.alpha < 1.0) {
            return Err(config_err("bounds.alpha must lie in (0, 1)"));
        }
        Ok(())
    }

    /// The λ grid, or the single λ.
    pub fn lambdas(&self) -> Vec<f64> {
        if self.model.lambdas.is_empty() {
            vec![self.model.lambda]
        } else {
            self.model.lambdas.clone()
        }
    }

    pub fn grid_spec(&self) -> RunResult<GridSpec> {
        Ok(GridSpec::new(self.grid.n_interior, self.grid.dt, self.grid.horizon)?)
    }

    pub fn observation_times(&self) -> Vec<f64> {
        if self.run.observation_times.is_empty() {
            (1..=16).map(|k| self.grid.horizon * k as f64 / 16.0).collect()
        } else {
            self.run.observation_times.clone()
        }
    }

    pub fn model_params(&self, lambda: f64) -> RunResult<ModelParams> {
        Ok(ModelParams {
            diffusivity: self.model.nu,
            lambda,
            sigma: self.model.sigma,
            boundary: self.model.boundary,
            grid: self.grid_spec()?,
            scheme: self.model.scheme,
            n_modes: self.model.n_modes,
        })
    }

    pub fn path_config(&self, lambda: f64, master_seed: u64) -> RunResult<PathConfig> {
        Ok(PathConfig {
            params: self.model_params(lambda)?,
            initial: self.model.initial.clone(),
            observation_times: self.observation_times(),
            master_seed,
        })
    }

    /// Functionals in kind-major order.
    pub fn functionals(&self) -> Vec<Functional> {
        let mut out = Vec::new();
        for kind in &self.moments.functionals {
            for &p in &self.moments.p {
                out.push(match kind {
                    FunctionalKind::Pointwise => Functional::Pointwise { x: self.moments.probe_x, p },
                    FunctionalKind::Sup => Functional::SupNorm { p },
                    FunctionalKind::Lp => Functional::LpNorm { p },
                });
            }
        }
        out
    }

    pub fn oracle_config(&self, lambda: f64) -> RunResult<OracleConfig> {
        let sigma_slope = self
            .model
            .sigma
            .linear_slope()
            .ok_or_else(|| config_err("the oracle backend needs linear σ"))?;
        let cfg = OracleConfig {
            initial: self.model.initial.clone(),
            diffusivity: self.model.nu,
            lambda,
            sigma_slope,
            boundary: self.model.boundary,
            horizon: self.oracle.horizon.unwrap_or(self.grid.horizon),
            time_panels: self.oracle.time_panels,
            space_nodes: self.oracle.space_nodes,
            estimate_error: self.oracle.estimate_error,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn kernel_spec(&self, boundary: Boundary) -> RunResult<KernelSpec> {
        Ok(KernelSpec::new(boundary, self.model.nu, self.kernel.tolerance)?)
    }

    pub fn lower_bound_grid(&self) -> RunResult<CalibrationGrid> {
        let k = &self.kernel;
        Ok(CalibrationGrid::new(k.t_range.0, k.t_range.1, k.t_nodes, k.margin, 1.0 - k.margin, k.x_nodes)?)
    }

    pub fn dx_grid(&self) -> RunResult<CalibrationGrid> {
        let k = &self.kernel;
        Ok(CalibrationGrid::new(k.dx_t_range.0, k.dx_t_range.1, k.t_nodes, 0.05, 0.95, k.x_nodes)?)
    }

    pub fn grr_params(&self) -> RunResult<GrrParams> {
        Ok(GrrParams::new(self.grr.p, self.grr.delta, self.grr.epsilon)?)
    }

    pub fn integral_resolution(&self) -> IntegralResolution {
        IntegralResolution::default()
    }
}

/// Seed precedence: flag, then `SHEAT_SEED`, then the config.
pub fn resolve_seed(flag: Option<u64>, env: Option<&str>, config: u64) -> RunResult<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v.trim().parse().map_err(|_| config_err(format!("{SEED_ENV}=`{v}` is not an unsigned integer"))),
        None => Ok(config),
    }
}
