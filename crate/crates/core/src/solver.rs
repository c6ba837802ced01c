//! Time stepping for ∂ₜu = ν∂²ₓu + λσ(u)ẇ on [0,1].
//!
//! Two schemes share the same noise: a semi-implicit finite-difference
//! scheme (implicit diffusion, explicit noise) and a spectral exponential
//! Euler scheme on the sine basis.
//!
//! For linear σ the equation is homogeneous of degree one, so the state
//! is kept as e^ℓ·v with v renormalized whenever it leaves a safe range.
//! This lets strongly excited paths run without overflow.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{domain, Error, Result};
use crate::kernel::Boundary;
use crate::linalg::TridiagonalFactor;
use crate::noise::{GridSpec, NoiseStream, SineBasis};

/// The nonlinearity σ with its certified constants K_U ≥ K_L.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum Sigma {
    /// σ(u) = k·u
    Linear { k: f64 },
    /// σ(u) = c·u + d·sin u with c > d ≥ 0
    LinearPlusSine { c: f64, d: f64 },
}

impl Sigma {
    pub fn linear(k: f64) -> Result<Self> {
        if !k.is_finite() {
            return Err(domain!("σ slope must be finite"));
        }
        Ok(Self::Linear { k })
    }

    pub fn linear_plus_sine(c: f64, d: f64) -> Result<Self> {
        if !(c > d && d >= 0.0 && c.is_finite()) {
            return Err(domain!("need c > d ≥ 0 for c·u + d·sin u, got c = {c}, d = {d}"));
        }
        Ok(Self::LinearPlusSine { c, d })
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::Linear { k } => Self::linear(k).map(|_| ()),
            Self::LinearPlusSine { c, d } => Self::linear_plus_sine(c, d).map(|_| ()),
        }
    }

    #[inline]
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            Self::Linear { k } => k * u,
            Self::LinearPlusSine { c, d } => c * u + d * libm::sin(u),
        }
    }

    /// Lipschitz constant K_U.
    pub fn upper(&self) -> f64 {
        match *self {
            Self::Linear { k } => k.abs(),
            Self::LinearPlusSine { c, d } => c + d,
        }
    }

    /// K_L with |σ(u)| ≥ K_L|u|.
    pub fn lower(&self) -> f64 {
        match *self {
            Self::Linear { k } => k.abs(),
            Self::LinearPlusSine { c, d } => c - d,
        }
    }

    pub fn linear_slope(&self) -> Option<f64> {
        match *self {
            Self::Linear { k } => Some(k),
            Self::LinearPlusSine { .. } => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields))]
pub enum InitialData {
    /// sin(nπx)
    SineMode { n: u32 },
    /// exp(1 − 1/(1 − s²)) with s = (x − ½)/(½ − γ), zero for |s| ≥ 1; peak 1 at x = ½.
    Bump { margin: f64 },
    /// Nodal values on the interior nodes.
    Table { values: Vec<f64> },
}

impl InitialData {
    pub fn eval(&self, x: f64) -> Result<f64> {
        match self {
            Self::SineMode { n } => Ok(libm::sin(*n as f64 * PI * x)),
            Self::Bump { margin } => {
                check_margin(*margin)?;
                Ok(bump(*margin, x))
            }
            Self::Table { .. } => Err(Error::Unsupported("tabulated data has no pointwise formula".into())),
        }
    }
}

fn check_margin(margin: f64) -> Result<()> {
    if !(margin > 0.0 && margin < 0.5) {
        return Err(domain!("bump margin must lie in (0, 1/2), got {margin}"));
    }
    Ok(())
}

fn bump(margin: f64, x: f64) -> f64 {
    let s = (x - 0.5) / (0.5 - margin);
    if s.abs() >= 1.0 {
        0.0
    } else {
        libm::exp(1.0 - 1.0 / (1.0 - s * s))
    }
}

/// Nodal values of the initial data on the interior nodes.
pub fn project_initial(u0: &InitialData, grid: &GridSpec) -> Result<Vec<f64>> {
    match u0 {
        InitialData::Table { values } => {
            if values.len() != grid.n_interior() {
                return Err(domain!("table has {} values, grid has {} interior nodes", values.len(), grid.n_interior()));
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(domain!("table contains non-finite values"));
            }
            Ok(values.clone())
        }
        other => grid.nodes().into_iter().map(|x| other.eval(x)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Scheme {
    SemiImplicit,
    Spectral,
}

/// Everything that determines the dynamics of one path.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub diffusivity: f64,
    pub lambda: f64,
    pub sigma: Sigma,
    pub boundary: Boundary,
    pub grid: GridSpec,
    pub scheme: Scheme,
    /// Modes kept by the spectral scheme; defaults to the interior node count.
    pub n_modes: Option<usize>,
}

impl ModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.diffusivity > 0.0 && self.diffusivity.is_finite()) {
            return Err(domain!("diffusivity must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(domain!("noise intensity must be nonnegative, got {}", self.lambda));
        }
        self.sigma.validate()?;
        if self.grid.dt() > self.grid.dx() {
            return Err(domain!("time step {} exceeds the spatial step {}", self.grid.dt(), self.grid.dx()));
        }
        match (self.scheme, self.boundary) {
            (_, Boundary::Free) => return Err(Error::Unsupported("paths live on [0,1]; free boundary is not a scheme".into())),
            (Scheme::Spectral, Boundary::Neumann) => {
                return Err(Error::Unsupported("the spectral scheme is Dirichlet only".into()))
            }
            _ => {}
        }
        if let Some(m) = self.n_modes {
            if m == 0 || m > self.grid.n_interior() {
                return Err(domain!("spectral modes must lie in 1..={}", self.grid.n_interior()));
            }
        }
        Ok(())
    }

    fn modes(&self) -> usize {
        self.n_modes.unwrap_or(self.grid.n_interior())
    }
}

/// A state u = e^{log_scale}·values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledField {
    pub values: Vec<f64>,
    pub log_scale: f64,
}

impl ScaledField {
    pub fn unscaled(values: Vec<f64>) -> Self {
        Self { values, log_scale: 0.0 }
    }

    /// Physical values; may overflow for large scales.
    pub fn to_physical(&self) -> Vec<f64> {
        let s = libm::exp(self.log_scale);
        self.values.iter().map(|v| v * s).collect()
    }
}

const RESCALE_HIGH: f64 = 1e100;
const RESCALE_LOW: f64 = 1e-100;

/// Stepping engine for one parameter set; reusable across samples.
#[derive(Debug, Clone)]
pub struct Stepper {
    params: ModelParams,
    kind: StepperKind,
    noise: Vec<f64>,
    work: Vec<f64>,
    modal: Vec<f64>,
}

#[derive(Debug, Clone)]
enum StepperKind {
    SemiImplicit { factor: TridiagonalFactor },
    Spectral { basis: SineBasis, decay: Vec<f64> },
}

impl Stepper {
    pub fn new(params: ModelParams) -> Result<Self> {
        params.validate()?;
        let n = params.grid.n_interior();
        let kind = match params.scheme {
            Scheme::SemiImplicit => {
                let r = params.diffusivity * params.grid.dt() / (params.grid.dx() * params.grid.dx());
                let mut diag = alloc::vec![1.0 + 2.0 * r; n];
                if params.boundary == Boundary::Neumann {
                    // ghost u₀ = u₁ and u_{n+1} = u_n
                    diag[0] -= r;
                    diag[n - 1] -= r;
                }
                let lower = alloc::vec![-r; n];
                let upper = alloc::vec![-r; n];
                StepperKind::SemiImplicit { factor: TridiagonalFactor::new(&lower, &diag, &upper)? }
            }
            Scheme::Spectral => {
                let m = params.modes();
                let basis = SineBasis::new(n, m)?;
                let decay = (1..=m)
                    .map(|k| {
                        let kf = k as f64;
                        libm::exp(-params.diffusivity * kf * kf * PI * PI * params.grid.dt())
                    })
                    .collect();
                StepperKind::Spectral { basis, decay }
            }
        };
        Ok(Self { params, kind, noise: Vec::new(), work: Vec::new(), modal: Vec::new() })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    /// Internal state for the initial nodal values: nodal values for the
    /// finite-difference scheme, sine coefficients ∫u₀e_n ≈ dx Σ_j u₀(x_j)e_n(x_j)
    /// for the spectral scheme.
    pub fn initial_state(&self, nodal: &[f64]) -> Result<ScaledField> {
        if nodal.len() != self.params.grid.n_interior() {
            return Err(Error::Mismatch("initial state length differs from grid".into()));
        }
        Ok(match &self.kind {
            StepperKind::SemiImplicit { .. } => ScaledField::unscaled(nodal.to_vec()),
            StepperKind::Spectral { basis, .. } => {
                let mut a = Vec::new();
                basis.analyse(nodal, &mut a);
                let dx = self.params.grid.dx();
                a.iter_mut().for_each(|v| *v *= dx);
                ScaledField::unscaled(a)
            }
        })
    }

    /// Nodal values of an internal state.
    pub fn nodal(&self, state: &ScaledField) -> ScaledField {
        match &self.kind {
            StepperKind::SemiImplicit { .. } => state.clone(),
            StepperKind::Spectral { basis, .. } => {
                let mut out = Vec::new();
                basis.synthesise(&state.values, &mut out);
                ScaledField { values: out, log_scale: state.log_scale }
            }
        }
    }

    /// Advances `state` by one step using the increments of `step` in `stream`.
    pub fn step(&mut self, state: &mut ScaledField, stream: &NoiseStream, step: usize) -> Result<()> {
        let p = &self.params;
        let lambda = p.lambda;
        let noisy = lambda != 0.0;
        if noisy {
            stream.fill_increments(step, &mut self.noise)?;
        }
        let linear = p.sigma.linear_slope().is_some();
        // σ acts on physical values; for linear σ the scale factors out.
        let scale = if linear { 1.0 } else { libm::exp(state.log_scale) };
        match &self.kind {
            StepperKind::SemiImplicit { factor } => {
                if noisy {
                    let coef = lambda / p.grid.dx();
                    for (u, dw) in state.values.iter_mut().zip(&self.noise) {
                        *u += coef * p.sigma.eval(*u * scale) / scale * dw;
                    }
                }
                factor.solve_in_place(&mut state.values);
            }
            StepperKind::Spectral { basis, decay } => {
                if noisy {
                    basis.synthesise(&state.values, &mut self.work);
                    for (u, dw) in self.work.iter_mut().zip(&self.noise) {
                        *u = p.sigma.eval(*u * scale) / scale * dw;
                    }
                    basis.analyse(&self.work, &mut self.modal);
                    for (a, f) in state.values.iter_mut().zip(&self.modal) {
                        *a += lambda * f;
                    }
                }
                for (a, d) in state.values.iter_mut().zip(decay) {
                    *a *= d;
                }
            }
        }
        if let Some(node) = state.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { step, node });
        }
        if linear {
            rescale(state);
        }
        Ok(())
    }
}

fn rescale(state: &mut ScaledField) {
    let m = state.values.iter().fold(0.0_f64, |acc, v| acc.max(v.abs()));
    if m > RESCALE_HIGH || (m < RESCALE_LOW && m > 0.0) {
        state.values.iter_mut().for_each(|v| *v /= m);
        state.log_scale += libm::log(m);
    }
}

/// Inputs of `simulate_path`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathConfig {
    pub params: ModelParams,
    pub initial: InitialData,
    /// Times at which snapshots are stored; each is snapped to the nearest step.
    pub observation_times: Vec<f64>,
    pub master_seed: u64,
}

impl PathConfig {
    /// Step indices of the observation times, sorted and deduplicated.
    pub fn observation_steps(&self) -> Result<Vec<usize>> {
        let grid = &self.params.grid;
        let n = grid.n_steps();
        let mut steps = Vec::with_capacity(self.observation_times.len());
        for &t in &self.observation_times {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(domain!("observation time {t} must be nonnegative"));
            }
            let k = libm::round(t / grid.dt()) as usize;
            if k > n {
                return Err(domain!("observation time {t} beyond the horizon {}", grid.horizon()));
            }
            steps.push(k);
        }
        steps.sort_unstable();
        steps.dedup();
        Ok(steps)
    }
}

/// Snapshots of one trajectory at the observation times (interior nodes).
#[derive(Debug, Clone, PartialEq)]
pub struct SolutionPath {
    pub grid: GridSpec,
    pub boundary: Boundary,
    pub lambda: f64,
    pub sigma: Sigma,
    pub times: Vec<f64>,
    pub snapshots: Vec<ScaledField>,
}

/// Runs one sample from t = 0 to the last observation time.
pub fn simulate_path(config: &PathConfig, sample_index: u64) -> Result<SolutionPath> {
    let mut stepper = Stepper::new(config.params.clone())?;
    simulate_with(&mut stepper, config, sample_index)
}

/// As [`simulate_path`] but reusing a stepper built for `config.params`.
pub fn simulate_with(stepper: &mut Stepper, config: &PathConfig, sample_index: u64) -> Result<SolutionPath> {
    let grid = config.params.grid;
    let steps = config.observation_steps()?;
    let stream = NoiseStream::new(config.master_seed, sample_index, grid);
    let nodal = project_initial(&config.initial, &grid)?;
    let mut state = stepper.initial_state(&nodal)?;
    let mut times = Vec::with_capacity(steps.len());
    let mut snapshots = Vec::with_capacity(steps.len());
    let mut k = 0;
    for &target in &steps {
        while k < target {
            stepper.step(&mut state, &stream, k)?;
            k += 1;
        }
        times.push(k as f64 * grid.dt());
        snapshots.push(stepper.nodal(&state));
    }
    Ok(SolutionPath {
        grid,
        boundary: config.params.boundary,
        lambda: config.params.lambda,
        sigma: config.params.sigma,
        times,
        snapshots,
    })
}
