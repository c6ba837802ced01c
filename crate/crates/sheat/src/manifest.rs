use std::path::Path;

use serde::{Deserialize, Serialize};
use sheat_core::kernel::{calibrate_lower_bound, fit_dx_bound};

use crate::config::ExperimentConfig;
use crate::error::{RunError, RunResult};
use crate::output::OutputFile;

pub const MANIFEST_FILE: &str = "manifest.json";

/// Empirical values of the kernel constants the theory leaves unspecified.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibratedConstants {
    pub kappa1: f64,
    pub kappa2: f64,
    /// min over the calibration grid of kernel / lower bound (≥ 1).
    pub lower_bound_margin: f64,
    pub k1: f64,
    pub k2: f64,
    pub k3: f64,
}

impl CalibratedConstants {
    pub fn compute(config: &ExperimentConfig) -> RunResult<Self> {
        let kernel = config.kernel_spec(sheat_core::kernel::Boundary::Dirichlet)?;
        let lower = calibrate_lower_bound(&kernel, config.kernel.margin, &config.lower_bound_grid()?)?;
        let dx = fit_dx_bound(&kernel, &config.dx_grid()?)?;
        Ok(Self {
            kappa1: lower.bound.kappa1(),
            kappa2: lower.bound.kappa2(),
            lower_bound_margin: lower.min_ratio,
            k1: dx.k1,
            k2: dx.k2,
            k3: kernel.longtime_constant(),
        })
    }
}

/// A sweep cell that did not complete.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedCell {
    pub lambda: f64,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub code_version: String,
    /// The effective configuration, with the resolved seed written into
    /// `run.master_seed`; re-running it reproduces every output.
    pub config: ExperimentConfig,
    pub workers: usize,
    /// ν·dt/dx² of the simulation grid.
    pub diffusion_number: f64,
    pub calibrated_constants: CalibratedConstants,
    pub wall_clock_seconds: f64,
    pub outputs: Vec<OutputFile>,
    pub failed_cells: Vec<FailedCell>,
    /// Sweep cells reloaded from an earlier run instead of recomputed.
    pub reused_cells: usize,
    /// Verification assertions that did not hold.
    pub failed_assertions: Vec<String>,
}

impl RunManifest {
    pub fn read(path: &Path) -> RunResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| RunError::io(path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| RunError::Config(format!("{}: {e}", path.display())))?;
        m.config.validate()?;
        Ok(m)
    }

    pub fn write(&self, dir: &Path) -> RunResult<()> {
        let path = dir.join(MANIFEST_FILE);
        let mut bytes = serde_json::to_vec_pretty(self)?;
        bytes.push(b'\n');
        std::fs::write(&path, bytes).map_err(|e| RunError::io(&path, e))
    }

    pub fn output(&self, path: &str) -> Option<&OutputFile> {
        self.outputs.iter().find(|o| o.path == path)
    }
}
