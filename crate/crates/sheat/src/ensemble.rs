//! Parallel Monte Carlo over fixed sample blocks.
//!
//! Samples are cut into blocks of [`BLOCK_SIZE`]; workers take whole blocks
//! and the block estimates are folded in block order. Noise depends only on
//! (seed, sample, step), so the result is the same for every worker count.

use rayon::prelude::*;
use sheat_core::solver::{simulate_with, PathConfig, SolutionPath, Stepper};
use sheat_core::stats::{reduce_blocks, EnsembleMoments, Functional, BLOCK_SIZE};

use crate::error::{RunError, RunResult};

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

/// Runs `f` on a pool of `workers` threads.
pub fn with_workers<T: Send>(workers: usize, f: impl FnOnce() -> T + Send) -> RunResult<T> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| RunError::Config(format!("cannot start {workers} workers: {e}")))?;
    Ok(pool.install(f))
}

/// Observation times after snapping to the time grid.
pub fn snapped_times(config: &PathConfig) -> RunResult<Vec<f64>> {
    let dt = config.params.grid.dt();
    Ok(config.observation_steps()?.into_iter().map(|k| k as f64 * dt).collect())
}

fn block_range(block: u64, n_samples: u64) -> std::ops::Range<u64> {
    block * BLOCK_SIZE..((block + 1) * BLOCK_SIZE).min(n_samples)
}

fn n_blocks(n_samples: u64) -> u64 {
    n_samples.div_ceil(BLOCK_SIZE)
}

/// Moment estimates of `functionals` at the observation times over samples
/// `0..n_samples`. Must be called inside [`with_workers`] to bound the
/// thread count; otherwise the global pool is used.
pub fn run_ensemble(config: &PathConfig, functionals: &[Functional], n_samples: u64) -> RunResult<EnsembleMoments> {
    if n_samples == 0 {
        return Err(RunError::Config("ensemble needs at least one sample".into()));
    }
    let times = snapped_times(config)?;
    let template = EnsembleMoments::new(functionals, &times)?;
    let stepper = Stepper::new(config.params.clone())?;
    let blocks: Vec<EnsembleMoments> = (0..n_blocks(n_samples))
        .into_par_iter()
        .map(|b| {
            let mut stepper = stepper.clone();
            let mut acc = template.clone();
            for s in block_range(b, n_samples) {
                let path = simulate_with(&mut stepper, config, s)?;
                acc.accumulate(&path)?;
            }
            Ok(acc)
        })
        .collect::<sheat_core::Result<_>>()?;
    Ok(reduce_blocks(&blocks)?.expect("at least one block"))
}

/// Paths `0..n` in sample order.
pub fn run_paths(config: &PathConfig, n: u64) -> RunResult<Vec<SolutionPath>> {
    let stepper = Stepper::new(config.params.clone())?;
    (0..n_blocks(n))
        .into_par_iter()
        .map(|b| {
            let mut stepper = stepper.clone();
            block_range(b, n).map(|s| simulate_with(&mut stepper, config, s)).collect::<sheat_core::Result<Vec<_>>>()
        })
        .collect::<sheat_core::Result<Vec<Vec<_>>>>()
        .map(|v| v.into_iter().flatten().collect())
        .map_err(RunError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use sheat_core::kernel::Boundary;
    use sheat_core::noise::GridSpec;
    use sheat_core::solver::{InitialData, ModelParams, Scheme, Sigma};

    fn small_config() -> PathConfig {
        PathConfig {
            params: ModelParams {
                diffusivity: 0.5,
                lambda: 1.0,
                sigma: Sigma::Linear { k: 1.0 },
                boundary: Boundary::Dirichlet,
                grid: GridSpec::new(15, 1e-3, 0.05).unwrap(),
                scheme: Scheme::SemiImplicit,
                n_modes: None,
            },
            initial: InitialData::Bump { margin: 0.2 },
            observation_times: vec![0.02, 0.05],
            master_seed: 9,
        }
    }

    #[test]
    fn worker_count_does_not_change_results() {
        let cfg = small_config();
        let f = [Functional::LpNorm { p: 2.0 }, Functional::SupNorm { p: 4.0 }];
        let one = with_workers(1, || run_ensemble(&cfg, &f, 150)).unwrap().unwrap();
        let three = with_workers(3, || run_ensemble(&cfg, &f, 150)).unwrap().unwrap();
        assert_eq!(one, three);
        assert_eq!(one.sample_count(), 150);
    }

    #[test]
    fn paths_come_back_in_sample_order() {
        let cfg = small_config();
        let paths = with_workers(2, || run_paths(&cfg, 70)).unwrap().unwrap();
        assert_eq!(paths.len(), 70);
        let direct = sheat_core::solver::simulate_path(&cfg, 69).unwrap();
        assert_eq!(paths[69], direct);
    }
}
