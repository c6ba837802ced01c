//! Discrete space-time white noise with random access by
//! (seed, sample, step, cell).
//!
//! Each sample owns a ChaCha stream; each time step owns a window of
//! 2^36 words inside it, so any step can be regenerated without touching
//! the others. Normals come from the ziggurat method, which consumes a
//! variable number of words, so a single cell is regenerated by replaying
//! its step up to that cell.

use alloc::vec::Vec;
use core::f64::consts::{PI, SQRT_2};

use rand::distributions::Distribution;
use rand_chacha::ChaCha8Rng;
use rand_core::SeedableRng;
use rand_distr::StandardNormal;

use crate::error::{domain, Result};

/// Uniform space-time lattice: `n_interior` nodes x_j = j·dx, dx = 1/(n+1).
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GridSpec {
    n_interior: usize,
    dt: f64,
    horizon: f64,
}

impl GridSpec {
    pub fn new(n_interior: usize, dt: f64, horizon: f64) -> Result<Self> {
        if n_interior == 0 {
            return Err(domain!("grid needs at least one interior node"));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(domain!("time step must be positive, got {dt}"));
        }
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(domain!("horizon must be positive, got {horizon}"));
        }
        Ok(Self { n_interior, dt, horizon })
    }

    pub fn n_interior(&self) -> usize {
        self.n_interior
    }

    pub fn dx(&self) -> f64 {
        1.0 / (self.n_interior as f64 + 1.0)
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    /// ceil(T/dt), ignoring a relative excess below 10⁻⁹ from rounding.
    pub fn n_steps(&self) -> usize {
        let r = self.horizon / self.dt;
        libm::ceil(r - 1e-9 * r.max(1.0)) as usize
    }

    pub fn node(&self, j: usize) -> f64 {
        (j as f64 + 1.0) * self.dx()
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_interior).map(|j| self.node(j)).collect()
    }

    /// ν·dt/dx², recorded for the manifest; the implicit scheme does not need it small.
    pub fn diffusion_number(&self, nu: f64) -> f64 {
        nu * self.dt / (self.dx() * self.dx())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseStream {
    master_seed: u64,
    sample_index: u64,
    grid: GridSpec,
}

/// log2 of the words reserved per step; far above any ziggurat consumption.
const STEP_WINDOW_BITS: u32 = 36;

impl NoiseStream {
    pub fn new(master_seed: u64, sample_index: u64, grid: GridSpec) -> Self {
        Self { master_seed, sample_index, grid }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn sample_index(&self) -> u64 {
        self.sample_index
    }

    pub fn grid(&self) -> &GridSpec {
        &self.grid
    }

    fn rng_at(&self, step: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(expand_seed(self.master_seed));
        rng.set_stream(self.sample_index);
        rng.set_word_pos((step as u128) << STEP_WINDOW_BITS);
        rng
    }

    fn check_step(&self, step: usize) -> Result<()> {
        let n = self.grid.n_steps();
        if step >= n {
            return Err(domain!("step index {step} out of range (n_steps = {n})"));
        }
        Ok(())
    }

    /// Standard normals for every cell at `step`.
    pub fn standard_normals(&self, step: usize, out: &mut Vec<f64>) -> Result<()> {
        self.check_step(step)?;
        let n = self.grid.n_interior;
        out.clear();
        let mut rng = self.rng_at(step);
        out.extend(Distribution::<f64>::sample_iter(StandardNormal, &mut rng).take(n));
        Ok(())
    }

    /// Cell increments ΔW_j ~ N(0, dt·dx), written into `out`.
    pub fn fill_increments(&self, step: usize, out: &mut Vec<f64>) -> Result<()> {
        self.standard_normals(step, out)?;
        let sd = libm::sqrt(self.grid.dt * self.grid.dx());
        out.iter_mut().for_each(|v| *v *= sd);
        Ok(())
    }

    pub fn sample_increments(&self, step: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(self.grid.n_interior);
        self.fill_increments(step, &mut out)?;
        Ok(out)
    }

    /// The increment of one cell, regenerated from its own step only.
    pub fn increment_at(&self, step: usize, cell: usize) -> Result<f64> {
        self.check_step(step)?;
        if cell >= self.grid.n_interior {
            return Err(domain!("cell {cell} out of range"));
        }
        let mut rng = self.rng_at(step);
        let z = Distribution::<f64>::sample_iter(StandardNormal, &mut rng).nth(cell).unwrap_or(0.0);
        Ok(z * libm::sqrt(self.grid.dt * self.grid.dx()))
    }

    /// Mode increments ⟨ΔW, √2 sin(nπ·)⟩ for n = 1..=n_modes, obtained from
    /// the cell increments of the same step. Each is exactly N(0, dt).
    pub fn spectral_increments(&self, step: usize, basis: &SineBasis) -> Result<Vec<f64>> {
        if basis.n_nodes() != self.grid.n_interior {
            return Err(domain!("sine basis built for {} nodes, grid has {}", basis.n_nodes(), self.grid.n_interior));
        }
        let cells = self.sample_increments(step)?;
        let mut modes = Vec::new();
        basis.analyse(&cells, &mut modes);
        Ok(modes)
    }
}

/// Table of e_n(x_j) = √2 sin(nπx_j) on the interior nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct SineBasis {
    n_nodes: usize,
    n_modes: usize,
    /// row-major [mode][node]
    table: Vec<f64>,
}

impl SineBasis {
    pub fn new(n_nodes: usize, n_modes: usize) -> Result<Self> {
        if n_modes == 0 || n_modes > n_nodes {
            return Err(domain!("need 1 ≤ n_modes ≤ {n_nodes}, got {n_modes}"));
        }
        let h = PI / (n_nodes as f64 + 1.0);
        let mut table = Vec::with_capacity(n_nodes * n_modes);
        for n in 1..=n_modes {
            for j in 1..=n_nodes {
                // reduce the argument exactly before calling sin
                let k = (n * j) % (2 * (n_nodes + 1));
                table.push(SQRT_2 * libm::sin(h * k as f64));
            }
        }
        Ok(Self { n_nodes, n_modes, table })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_modes(&self) -> usize {
        self.n_modes
    }

    pub fn row(&self, mode: usize) -> &[f64] {
        &self.table[(mode - 1) * self.n_nodes..mode * self.n_nodes]
    }

    /// out_n = Σ_j v_j e_n(x_j).
    pub fn analyse(&self, v: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for n in 1..=self.n_modes {
            out.push(self.row(n).iter().zip(v).map(|(e, x)| e * x).sum());
        }
    }

    /// out_j = Σ_n a_n e_n(x_j).
    pub fn synthesise(&self, coeffs: &[f64], out: &mut Vec<f64>) {
        out.clear();
        out.resize(self.n_nodes, 0.0);
        for (n, &a) in coeffs.iter().enumerate().take(self.n_modes) {
            if a == 0.0 {
                continue;
            }
            for (o, e) in out.iter_mut().zip(self.row(n + 1)) {
                *o += a * e;
            }
        }
    }
}

fn expand_seed(master: u64) -> [u8; 32] {
    let mut state = master;
    let mut out = [0u8; 32];
    for chunk in out.chunks_exact_mut(8) {
        chunk.copy_from_slice(&splitmix64(&mut state).to_le_bytes());
    }
    out
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
