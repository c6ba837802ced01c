//! λ sweeps with per-cell persistence.
//!
//! Each λ is one cell: a full ensemble covering every (p, functional, t).
//! A finished cell is written as TOML (exact float round trip, ±∞ allowed)
//! and listed with its checksum in a state file. A rerun with the same
//! fingerprint reloads matching cells instead of recomputing them.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sheat_core::stats::{EnsembleMoments, Functional, MomentEstimate};

use crate::config::ExperimentConfig;
use crate::ensemble::run_ensemble;
use crate::error::{RunError, RunResult};
use crate::manifest::FailedCell;
use crate::output::{sha256_hex, Bundle};

/// One row of the long-format moment table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MomentRow {
    pub lambda: f64,
    pub p: f64,
    pub t: f64,
    pub functional: String,
    pub n: u64,
    pub mean: f64,
    pub ci: f64,
    pub log_mean: f64,
    pub log_ci: f64,
    /// Set when the estimate reports on the log scale only.
    pub log_mean_flag: bool,
}

impl MomentRow {
    pub fn new(lambda: f64, e: &MomentEstimate) -> Self {
        let log_domain = e.log_domain();
        Self {
            lambda,
            p: e.functional().p(),
            t: e.t(),
            functional: e.functional().label(),
            n: e.n(),
            mean: if log_domain { f64::INFINITY } else { e.mean() },
            ci: if log_domain { f64::INFINITY } else { e.ci_half_width() },
            log_mean: e.log_mean(),
            log_ci: e.log_ci_half_width(),
            log_mean_flag: log_domain,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CellFile {
    lambda: f64,
    ensemble: EnsembleMoments,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
struct SweepState {
    fingerprint: String,
    /// Cell file → checksum.
    cells: BTreeMap<String, String>,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    /// Completed cells in λ order.
    pub cells: Vec<(f64, EnsembleMoments)>,
    pub failed: Vec<FailedCell>,
    /// Cells reloaded from an earlier run.
    pub reused: usize,
}

impl SweepResult {
    pub fn rows(&self) -> Vec<MomentRow> {
        self.cells.iter().flat_map(|(l, e)| e.estimates.iter().map(move |est| MomentRow::new(*l, est))).collect()
    }

    pub fn cell(&self, lambda: f64) -> Option<&EnsembleMoments> {
        self.cells.iter().find(|(l, _)| *l == lambda).map(|(_, e)| e)
    }
}

/// What a sweep computes; part of the fingerprint.
#[derive(Debug, Clone, Serialize)]
pub struct SweepPlan {
    pub lambdas: Vec<f64>,
    pub functionals: Vec<Functional>,
    pub observation_times: Vec<f64>,
    pub n_samples: u64,
    pub seed: u64,
}

fn fingerprint(config: &ExperimentConfig, plan: &SweepPlan) -> RunResult<String> {
    // Only keys that affect the numbers.
    #[derive(Serialize)]
    struct Key<'a> {
        model: &'a crate::config::ModelSection,
        grid: &'a crate::config::GridSection,
        plan: &'a SweepPlan,
    }
    let key = Key { model: &config.model, grid: &config.grid, plan };
    Ok(sha256_hex(&serde_json::to_vec(&key)?))
}

fn read_state(path: &Path) -> SweepState {
    std::fs::read_to_string(path).ok().and_then(|s| serde_json::from_str(&s).ok()).unwrap_or_default()
}

fn write_state(path: &Path, state: &SweepState) -> RunResult<Vec<u8>> {
    let mut text = serde_json::to_vec_pretty(state)?;
    text.push(b'\n');
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| RunError::io(parent, e))?;
    }
    std::fs::write(path, &text).map_err(|e| RunError::io(path, e))?;
    Ok(text)
}

fn try_reuse(dir: &Path, name: &str, expected: Option<&String>) -> Option<(Vec<u8>, CellFile)> {
    let bytes = std::fs::read(dir.join(name)).ok()?;
    if Some(&sha256_hex(&bytes)) != expected {
        return None;
    }
    let cell: CellFile = toml::from_str(std::str::from_utf8(&bytes).ok()?).ok()?;
    Some((bytes, cell))
}

/// Runs (or resumes) the sweep; cell files live under `<bundle>/<prefix>/`.
/// Failed cells are listed, not fatal.
pub fn run_sweep(config: &ExperimentConfig, plan: &SweepPlan, bundle: &mut Bundle, prefix: &str) -> RunResult<SweepResult> {
    let fp = fingerprint(config, plan)?;
    let state_name = format!("{prefix}/state.json");
    let state_path = bundle.dir().join(&state_name);
    let old = read_state(&state_path);
    let mut state = SweepState { fingerprint: fp.clone(), cells: BTreeMap::new() };
    let mut result = SweepResult { cells: Vec::new(), failed: Vec::new(), reused: 0 };
    for (i, &lambda) in plan.lambdas.iter().enumerate() {
        let name = format!("{prefix}/lambda-{i:03}.toml");
        let reusable = if old.fingerprint == fp { try_reuse(bundle.dir(), &name, old.cells.get(&name)) } else { None };
        let reused = reusable.filter(|(_, c)| c.lambda == lambda);
        let (bytes, ensemble) = match reused {
            Some((bytes, cell)) => {
                result.reused += 1;
                bundle.record(&name, &bytes);
                (bytes, cell.ensemble)
            }
            None => {
                let run = config
                    .path_config(lambda, plan.seed)
                    .map(|mut pc| {
                        pc.observation_times = plan.observation_times.clone();
                        pc
                    })
                    .and_then(|pc| run_ensemble(&pc, &plan.functionals, plan.n_samples));
                let ensemble = match run {
                    Ok(e) => e,
                    Err(e @ RunError::Config(_)) => return Err(e),
                    Err(e) => {
                        result.failed.push(FailedCell { lambda, error: e.to_string() });
                        continue;
                    }
                };
                let cell = CellFile { lambda, ensemble };
                let text = toml::to_string(&cell).map_err(|e| RunError::Numerical(format!("cell {name}: {e}")))?;
                bundle.write_bytes(&name, text.as_bytes())?;
                (text.into_bytes(), cell.ensemble)
            }
        };
        state.cells.insert(name, sha256_hex(&bytes));
        write_state(&state_path, &state)?;
        result.cells.push((lambda, ensemble));
    }
    let text = write_state(&state_path, &state)?;
    bundle.record(&state_name, &text);
    Ok(result)
}

impl SweepPlan {
    pub fn from_config(config: &ExperimentConfig, seed: u64) -> RunResult<Self> {
        let pc = config.path_config(config.lambdas()[0], seed)?;
        Ok(Self {
            lambdas: config.lambdas(),
            functionals: config.functionals(),
            observation_times: crate::ensemble::snapped_times(&pc)?,
            n_samples: config.run.n_samples,
            seed,
        })
    }
}
