//! Deterministic second moments for linear σ(u) = k·u.
//!
//! By the Itô isometry m(t,x) = E[u(t,x)²] solves
//!
//!   m(t,x) = D(t,x)² + λ²k² ∫₀ᵗ ∫₀¹ g²(t−s,x,y) m(s,y) dy ds,
//!
//! with D = ∫ g(t,x,y) u₀(y) dy. The solver works with M = e^{-ρt} m, where
//! ρ = λ⁴k⁴/(8ν) is the growth rate of the same equation on the line
//! (four times that under Neumann reflection), so that M varies slowly.
//! M is piecewise linear in time (uniform panels) and in space (hat
//! functions); all products of the kernel with the basis are integrated
//! with the singular behaviour of g² treated exactly:
//!
//! * for ντ ≤ 1/64, g² is a finite sum of Gaussian pairs and its integral
//!   against a hat is closed form;
//! * for larger ντ the modal expansion of g² is integrated in closed form
//!   in τ against the linear time weights.
//!
//! The τ integrals over the first panel use v = √τ on panels graded
//! geometrically toward 0.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::analysis::{fit_line, fit_through_origin, late_window, FitPoint};
use crate::error::{domain, Error, Result};
use crate::kernel::Boundary;
use crate::linalg::Lu;
use crate::quad::GaussLegendre;
use crate::solver::InitialData;
use crate::special::{normal_mass, normal_pdf};

/// Exponents beyond this are treated as vanishing contributions (e^{-46} ≈ 10⁻²⁰).
const NEGLIGIBLE_EXPONENT: f64 = 46.0;
/// Image regime for ν·τ up to this value.
const IMAGE_LIMIT: f64 = 1.0 / 64.0;
/// Modes kept past the image regime: e^{-π²n²/64} < 10⁻¹⁹ for n > this.
const KERNEL_MODES: usize = 17;
/// Sine/cosine coefficients of the initial data.
const DATA_MODES: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub initial: InitialData,
    pub diffusivity: f64,
    pub lambda: f64,
    /// Slope k of σ(u) = k·u.
    pub sigma_slope: f64,
    pub boundary: Boundary,
    pub horizon: f64,
    pub time_panels: usize,
    /// Interior spatial nodes J; nodes are j/(J+1).
    pub space_nodes: usize,
    /// Also solve with doubled time panels and with halved spatial step,
    /// and report the differences as the error estimate.
    pub estimate_error: bool,
}

impl OracleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.diffusivity > 0.0 && self.diffusivity.is_finite()) {
            return Err(domain!("diffusivity must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite() && self.sigma_slope.is_finite()) {
            return Err(domain!("noise intensity and σ slope must be finite, λ ≥ 0"));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(domain!("horizon must be positive"));
        }
        if self.time_panels == 0 || self.space_nodes == 0 {
            return Err(domain!("need at least one time panel and one spatial node"));
        }
        if self.boundary == Boundary::Free {
            return Err(Error::Unsupported("the oracle lives on [0,1]".into()));
        }
        Ok(())
    }

    /// λ²k², the only combination of λ and k that enters.
    pub fn coupling(&self) -> f64 {
        self.lambda * self.lambda * self.sigma_slope * self.sigma_slope
    }

    /// Growth rate used for the exponential shift.
    pub fn shift_rate(&self) -> f64 {
        let c = self.coupling();
        let free = c * c / (8.0 * self.diffusivity);
        match self.boundary {
            Boundary::Neumann => 4.0 * free,
            _ => free,
        }
    }
}

/// Second moments on the (time, node) grid, stored as logarithms.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentField {
    pub boundary: Boundary,
    pub diffusivity: f64,
    pub lambda: f64,
    pub sigma_slope: f64,
    pub times: Vec<f64>,
    /// Spatial nodes carrying unknowns (interior for Dirichlet, all for Neumann).
    pub nodes: Vec<f64>,
    /// ln m[time][node]; −∞ where m = 0.
    pub log_moment: Vec<Vec<f64>>,
    /// |Δ ln m| summed over time and space refinement, when requested.
    pub log_error: Option<Vec<Vec<f64>>>,
    /// ∫ of each node's hat function, for spatial integrals of m.
    hat_mass: Vec<f64>,
}

impl MomentField {
    pub fn moment(&self, k: usize, j: usize) -> f64 {
        libm::exp(self.log_moment[k][j])
    }

    /// Absolute error estimate m·(e^{|Δ ln m|} − 1), if available.
    pub fn moment_error(&self, k: usize, j: usize) -> Option<f64> {
        self.log_error.as_ref().map(|e| self.moment(k, j) * libm::expm1(e[k][j]))
    }

    /// Index of the node nearest to `x`.
    pub fn node_index(&self, x: f64) -> usize {
        let mut best = 0;
        for (j, &xj) in self.nodes.iter().enumerate() {
            if (xj - x).abs() < (self.nodes[best] - x).abs() {
                best = j;
            }
        }
        best
    }

    /// Index of the time nearest to `t`.
    pub fn time_index(&self, t: f64) -> usize {
        let h = self.times.get(1).copied().unwrap_or(1.0) - self.times[0];
        (libm::round(t / h) as usize).min(self.times.len() - 1)
    }

    /// ln ∫₀¹ m(t_k, x) dx for the piecewise-linear field.
    pub fn log_energy(&self, k: usize) -> f64 {
        log_sum_exp(self.log_moment[k].iter().zip(&self.hat_mass).map(|(l, w)| l + libm::log(*w)))
    }

    /// Error estimate of [`Self::log_energy`]: ln(1 + Σ w m (e^{δ} − 1) / Σ w m)
    /// with δ the nodal log errors, so nodes carrying little mass count little.
    pub fn log_energy_error(&self, k: usize) -> Option<f64> {
        let e = self.log_error.as_ref()?;
        let total = self.log_energy(k);
        if !total.is_finite() {
            return Some(0.0);
        }
        let rel: f64 = self.log_moment[k]
            .iter()
            .zip(&self.hat_mass)
            .zip(&e[k])
            .filter(|((l, _), _)| l.is_finite())
            .map(|((l, w), d)| libm::exp(l + libm::log(*w) - total) * libm::expm1(*d))
            .sum();
        Some(libm::log1p(rel))
    }

    /// Rows of ln m at the requested times, which must increase strictly.
    pub fn sample_times(&self, times: &[f64]) -> Result<Vec<(f64, Vec<f64>)>> {
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(domain!("requested times must increase strictly"));
        }
        times
            .iter()
            .map(|&t| {
                if !(t >= 0.0 && t <= *self.times.last().unwrap_or(&0.0) * (1.0 + 1e-12)) {
                    return Err(domain!("time {t} outside the solved horizon"));
                }
                let k = self.time_index(t);
                Ok((self.times[k], self.log_moment[k].clone()))
            })
            .collect()
    }
}

fn log_sum_exp<I: Iterator<Item = f64>>(it: I) -> f64 {
    let v: Vec<f64> = it.collect();
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + libm::log(v.iter().map(|x| libm::exp(x - m)).sum::<f64>())
}

/// Orthonormal eigenfunctions on [0,1]: √2 sin(nπx) (Dirichlet, n ≥ 1),
/// 1 and √2 cos(nπx) (Neumann, n ≥ 0).
fn eigenfunction(boundary: Boundary, n: usize, x: f64) -> f64 {
    match boundary {
        Boundary::Neumann if n == 0 => 1.0,
        Boundary::Neumann => core::f64::consts::SQRT_2 * libm::cos(n as f64 * PI * x),
        _ => core::f64::consts::SQRT_2 * libm::sin(n as f64 * PI * x),
    }
}

fn first_mode(boundary: Boundary) -> usize {
    if boundary == Boundary::Neumann { 0 } else { 1 }
}

/// The deterministic part D(t,x) = ∫ g(t,x,y) u₀(y) dy.
#[derive(Debug, Clone)]
pub struct InitialFlow {
    boundary: Boundary,
    diffusivity: f64,
    initial: InitialData,
    coeffs: Vec<f64>,
    rule: GaussLegendre,
}

impl InitialFlow {
    pub fn new(initial: &InitialData, boundary: Boundary, diffusivity: f64) -> Result<Self> {
        if boundary == Boundary::Free {
            return Err(Error::Unsupported("initial flow lives on [0,1]".into()));
        }
        if let InitialData::Table { values } = initial {
            if values.is_empty() {
                return Err(domain!("empty initial table"));
            }
        }
        profile(initial, boundary, 0.5)?;
        let rule = GaussLegendre::new(16);
        let mut coeffs = vec![0.0; DATA_MODES + 1];
        for (n, c) in coeffs.iter_mut().enumerate().skip(first_mode(boundary)) {
            let mut err = None;
            *c = rule.composite(0.0, 1.0, 256, |y| match profile(initial, boundary, y) {
                Ok(v) => v * eigenfunction(boundary, n, y),
                Err(e) => {
                    err = Some(e);
                    0.0
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
        }
        Ok(Self { boundary, diffusivity, initial: initial.clone(), coeffs, rule })
    }

    pub fn initial_value(&self, x: f64) -> f64 {
        profile(&self.initial, self.boundary, x).unwrap_or(0.0)
    }

    pub fn value(&self, t: f64, x: f64) -> f64 {
        if t <= 0.0 {
            return self.initial_value(x);
        }
        let nu = self.diffusivity;
        if nu * t >= IMAGE_LIMIT {
            let mut sum = 0.0;
            for n in first_mode(self.boundary)..=DATA_MODES {
                let nf = n as f64;
                let decay = nu * PI * PI * nf * nf * t;
                if decay > NEGLIGIBLE_EXPONENT {
                    break;
                }
                sum += libm::exp(-decay) * self.coeffs[n] * eigenfunction(self.boundary, n, x);
            }
            return sum;
        }
        let sign = if self.boundary == Boundary::Neumann { 1.0 } else { -1.0 };
        let width = libm::sqrt(2.0 * nu * t);
        let mut sum = 0.0;
        for (c, s) in image_centres(x, sign) {
            let lo = (c - 12.0 * width).max(0.0);
            let hi = (c + 12.0 * width).min(1.0);
            if hi <= lo {
                continue;
            }
            sum += s * self.rule.composite(lo, hi, 16, |y| {
                crate::kernel::free_kernel(nu, t, y - c) * self.initial_value(y)
            });
        }
        sum
    }
}

/// Initial data as a function on [0,1]; tables are interpolated linearly
/// between their nodes j/(n+1) and extended by 0 (Dirichlet) or by the
/// end values (Neumann).
fn profile(initial: &InitialData, boundary: Boundary, x: f64) -> Result<f64> {
    match initial {
        InitialData::Table { values } => {
            let n = values.len();
            let pos = x * (n as f64 + 1.0);
            let i = libm::floor(pos) as isize;
            let frac = pos - i as f64;
            let at = |k: isize| -> f64 {
                if k <= 0 {
                    if boundary == Boundary::Neumann { values[0] } else { 0.0 }
                } else if k as usize > n {
                    if boundary == Boundary::Neumann { values[n - 1] } else { 0.0 }
                } else {
                    values[k as usize - 1]
                }
            };
            Ok(at(i) * (1.0 - frac) + at(i + 1) * frac)
        }
        other => other.eval(x),
    }
}

/// Reflections of x that matter on [0,1] for ν·τ ≤ 1/64, with their signs.
fn image_centres(x: f64, sign: f64) -> [(f64, f64); 6] {
    [(x, 1.0), (x + 2.0, 1.0), (x - 2.0, 1.0), (-x, sign), (2.0 - x, sign), (-2.0 - x, sign)]
}

/// Spatial layout and weight tables for one (P, J) resolution.
struct Discretization {
    boundary: Boundary,
    nu: f64,
    rho: f64,
    step: f64,
    spacing: f64,
    /// Global node index of the first unknown.
    offset: usize,
    nodes: Vec<f64>,
    supports: Vec<(f64, f64, f64)>,
    modes: Vec<usize>,
    /// eigenfunction values [unknown][mode slot]
    mode_at_nodes: Vec<Vec<f64>>,
    /// ∫ φ_n φ_m hat_j, [pair][unknown] with pairs n ≤ m
    pair_hat: Vec<(usize, usize, Vec<f64>)>,
}

impl Discretization {
    fn new(boundary: Boundary, nu: f64, rho: f64, horizon: f64, panels: usize, interior: usize) -> Self {
        let spacing = 1.0 / (interior as f64 + 1.0);
        let (offset, count) = match boundary {
            Boundary::Neumann => (0, interior + 2),
            _ => (1, interior),
        };
        let nodes: Vec<f64> = (0..count).map(|k| (k + offset) as f64 * spacing).collect();
        let supports = nodes
            .iter()
            .map(|&x| ((x - spacing).max(0.0), x, (x + spacing).min(1.0)))
            .collect();
        let modes: Vec<usize> = (first_mode(boundary)..=KERNEL_MODES).collect();
        let mode_at_nodes = nodes
            .iter()
            .map(|&x| modes.iter().map(|&n| eigenfunction(boundary, n, x)).collect())
            .collect();
        let mut d = Self {
            boundary,
            nu,
            rho,
            step: horizon / panels as f64,
            spacing,
            offset,
            nodes,
            supports,
            modes,
            mode_at_nodes,
            pair_hat: Vec::new(),
        };
        d.pair_hat = d.build_pair_hat();
        d
    }

    fn unknowns(&self) -> usize {
        self.nodes.len()
    }

    fn build_pair_hat(&self) -> Vec<(usize, usize, Vec<f64>)> {
        let rule = GaussLegendre::new(8);
        let top = *self.modes.last().unwrap_or(&1) as f64;
        // keep ≤ 1.5 rad of the fastest product per sub-panel
        let sub = libm::ceil(2.0 * top * PI * self.spacing / 1.5).max(1.0) as usize;
        let mut out = Vec::new();
        for (si, &n) in self.modes.iter().enumerate() {
            for &m in &self.modes[si..] {
                let row = self
                    .supports
                    .iter()
                    .map(|&(l, c, r)| {
                        let f = |y: f64| eigenfunction(self.boundary, n, y) * eigenfunction(self.boundary, m, y);
                        let mut s = 0.0;
                        if c > l {
                            s += rule.composite(l, c, sub, |y| f(y) * (y - l) / (c - l));
                        }
                        if r > c {
                            s += rule.composite(c, r, sub, |y| f(y) * (r - y) / (r - c));
                        }
                        s
                    })
                    .collect();
                out.push((n, m, row));
            }
        }
        out
    }

    fn hat_mass(&self) -> Vec<f64> {
        self.supports.iter().map(|&(l, _, r)| 0.5 * (r - l)).collect()
    }

    /// Adds A(τ; x_a, ·) = ∫ g²(τ, x_a, y) hat(y) dy for every unknown hat
    /// into `row`, using the Gaussian-pair form of g².
    fn image_row(&self, tau: f64, xa: f64, row: &mut [f64]) {
        let sign = if self.boundary == Boundary::Neumann { 1.0 } else { -1.0 };
        let nt = self.nu * tau;
        let pref = 1.0 / libm::sqrt(8.0 * PI * nt);
        let sd = libm::sqrt(nt);
        let centres = image_centres(xa, sign);
        let segments = libm::round(1.0 / self.spacing) as isize;
        let unknowns = self.nodes.len() as isize;
        let offset = self.offset as isize;
        for p in 0..centres.len() {
            for q in p..centres.len() {
                let (cp, sp) = centres[p];
                let (cq, sq) = centres[q];
                let gap = cp - cq;
                let expo = gap * gap / (8.0 * nt);
                if expo > NEGLIGIBLE_EXPONENT {
                    continue;
                }
                let mean = 0.5 * (cp + cq);
                let lo = mean - 9.0 * sd;
                let hi = mean + 9.0 * sd;
                if hi < 0.0 || lo > 1.0 {
                    continue;
                }
                let mult = if p == q { 1.0 } else { 2.0 };
                let w = mult * sp * sq * pref * libm::exp(-expo) / self.spacing;
                let k_lo = (libm::floor(lo / self.spacing) as isize).max(0);
                let k_hi = (libm::floor(hi / self.spacing) as isize).min(segments - 1);
                let mut left_x = k_lo as f64 * self.spacing;
                let mut za = (left_x - mean) / sd;
                let mut pa = normal_pdf(za);
                for k in k_lo..=k_hi {
                    let right_x = (k + 1) as f64 * self.spacing;
                    let zb = (right_x - mean) / sd;
                    let pb = normal_pdf(zb);
                    let mass = normal_mass(za, zb);
                    // hat with apex at the right end rises on this segment
                    let rising = k + 1 - offset;
                    if rising >= 0 && rising < unknowns {
                        row[rising as usize] += w * ((mean - left_x) * mass + sd * (pa - pb));
                    }
                    let falling = k - offset;
                    if falling >= 0 && falling < unknowns {
                        row[falling as usize] += w * ((right_x - mean) * mass - sd * (pa - pb));
                    }
                    left_x = right_x;
                    za = zb;
                    pa = pb;
                }
            }
        }
    }

    /// τ quadrature nodes and weights for the image part of [lo, hi].
    fn image_nodes(&self, lo: f64, hi: f64, first_panel: bool, rule: &GaussLegendre) -> Vec<(f64, f64)> {
        let mut out = Vec::new();
        if first_panel {
            // v = √τ, panels [v/2, v] down to a negligible remainder
            let vmax = libm::sqrt(hi);
            let vmin = 1e-11 * vmax.min(1.0);
            let mut v_hi = vmax;
            while v_hi > vmin {
                let v_lo = 0.5 * v_hi;
                for (v, w) in rule.mapped(v_lo, v_hi) {
                    out.push((v * v, 2.0 * v * w));
                }
                v_hi = v_lo;
            }
            return out;
        }
        let len = hi - lo;
        let first = if self.rho > 0.0 { (2.0 / self.rho).min(len) } else { len };
        let mut a = lo;
        let mut width = first;
        while a < hi {
            let b = (a + width).min(hi);
            for node in rule.mapped(a, b) {
                out.push(node);
            }
            if self.rho * (b - lo) > NEGLIGIBLE_EXPONENT {
                break;
            }
            a = b;
            width *= 2.0;
        }
        out
    }

    /// Right and left half-hat weights of time interval `e`: dense J'×J'
    /// matrices for the image part and per-pair coefficients for the modal
    /// part. None when the interval is negligible.
    fn interval_weights(&self, e: usize, rule: &GaussLegendre) -> Option<IntervalWeights> {
        let h = self.step;
        let lo = e as f64 * h;
        let hi = lo + h;
        if e > 0 && self.rho * lo > NEGLIGIBLE_EXPONENT {
            return None;
        }
        let nj = self.unknowns();
        let split = IMAGE_LIMIT / self.nu;
        let mut out = IntervalWeights { image: None, modal: None };
        if lo < split {
            let top = hi.min(split);
            let mut right = vec![0.0; nj * nj];
            let mut left = vec![0.0; nj * nj];
            let mut row = vec![0.0; nj];
            for (tau, w) in self.image_nodes(lo, top, e == 0, rule) {
                let f = w * libm::exp(-self.rho * tau);
                if f == 0.0 {
                    continue;
                }
                let theta = (tau - lo) / h;
                for a in 0..nj {
                    row.iter_mut().for_each(|v| *v = 0.0);
                    self.image_row(tau, self.nodes[a], &mut row);
                    for j in 0..nj {
                        right[a * nj + j] += f * (1.0 - theta) * row[j];
                        left[a * nj + j] += f * theta * row[j];
                    }
                }
            }
            out.image = Some((right, left));
        }
        if hi > split {
            let a0 = lo.max(split);
            let len = hi - a0;
            let theta0 = (a0 - lo) / h;
            let gap = self.nu * PI * PI;
            let mut cr = vec![0.0; self.pair_hat.len()];
            let mut cl = vec![0.0; self.pair_hat.len()];
            for (p, (n, m, _)) in self.pair_hat.iter().enumerate() {
                let modal = gap * (*n * *n + *m * *m) as f64;
                if modal * a0 > NEGLIGIBLE_EXPONENT {
                    continue;
                }
                let kappa = self.rho + modal;
                let base = libm::exp(-kappa * a0);
                let i0 = base * len * phi1(kappa * len);
                let i1 = base * len * len * phi2(kappa * len);
                let mult = if n == m { 1.0 } else { 2.0 };
                cr[p] = mult * ((1.0 - theta0) * i0 - i1 / h);
                cl[p] = mult * (theta0 * i0 + i1 / h);
            }
            out.modal = Some((cr, cl));
        }
        Some(out)
    }

    /// φ_n(x_a)φ_m(x_a) for every pair, [unknown][pair].
    fn pair_at_nodes(&self) -> Vec<Vec<f64>> {
        (0..self.unknowns())
            .map(|a| {
                self.pair_hat
                    .iter()
                    .map(|(n, m, _)| {
                        let sn = self.modes.iter().position(|k| k == n).unwrap_or(0);
                        let sm = self.modes.iter().position(|k| k == m).unwrap_or(0);
                        self.mode_at_nodes[a][sn] * self.mode_at_nodes[a][sm]
                    })
                    .collect()
            })
            .collect()
    }

    /// ∫ φ_nφ_m V for a nodal field V, one entry per pair.
    fn pair_projection(&self, v: &[f64]) -> Vec<f64> {
        self.pair_hat.iter().map(|(_, _, hat)| hat.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
    }
}

struct IntervalWeights {
    image: Option<(Vec<f64>, Vec<f64>)>,
    modal: Option<(Vec<f64>, Vec<f64>)>,
}

/// (1 − e^{-z})/z
fn phi1(z: f64) -> f64 {
    if z.abs() < 1e-8 { 1.0 - 0.5 * z } else { -libm::expm1(-z) / z }
}

/// ∫₀¹ s e^{-zs} ds = (1 − e^{-z}(1 + z))/z²
fn phi2(z: f64) -> f64 {
    if z.abs() < 1e-2 {
        0.5 - z / 3.0 + z * z / 8.0 - z * z * z / 30.0 + z * z * z * z / 144.0
    } else {
        (-libm::expm1(-z) - z * libm::exp(-z)) / (z * z)
    }
}

/// Solves for ln m on the (P+1) × J' grid of one resolution.
fn solve_resolution(cfg: &OracleConfig, flow: &InitialFlow, panels: usize, interior: usize) -> Result<(Discretization, Vec<Vec<f64>>)> {
    let rho = cfg.shift_rate();
    let disc = Discretization::new(cfg.boundary, cfg.diffusivity, rho, cfg.horizon, panels, interior);
    let nj = disc.unknowns();
    let np = disc.pair_hat.len();
    let coupling = cfg.coupling();
    let h = disc.step;

    let m0: Vec<f64> = disc
        .nodes
        .iter()
        .map(|&x| {
            let v = flow.initial_value(x);
            v * v
        })
        .collect();
    let s0 = m0.iter().copied().fold(0.0, f64::max);
    if !(s0 > 0.0 && s0.is_finite()) {
        return Err(domain!("initial data vanishes on the oracle grid"));
    }
    let v0: Vec<f64> = m0.iter().map(|v| v / s0).collect();
    let pairs = disc.pair_at_nodes();
    let mut projections: Vec<Vec<f64>> = vec![disc.pair_projection(&v0)];
    let mut values: Vec<Vec<f64>> = vec![v0];
    let mut scales: Vec<f64> = vec![libm::log(s0)];

    // Lag weights Ω_d = R_d + L_{d-1} (d ≥ 1), split into a dense image part
    // and modal coefficients; start[n] = L_{n-1}·V₀ for the half hat at s = 0.
    let mut omega_image: Vec<Option<Vec<f64>>> = vec![None; panels + 1];
    let mut omega_modal: Vec<Option<Vec<f64>>> = vec![None; panels + 1];
    let mut start: Vec<Vec<f64>> = vec![vec![0.0; nj]; panels + 1];
    let mut lu = None;
    if coupling > 0.0 {
        let rule = GaussLegendre::new(16);
        for e in 0..panels {
            let Some(w) = disc.interval_weights(e, &rule) else { break };
            if let Some((right, left)) = &w.image {
                if e > 0 {
                    add_into(&mut omega_image[e], right);
                }
                add_into(&mut omega_image[e + 1], left);
                for a in 0..nj {
                    start[e + 1][a] += (0..nj).map(|j| left[a * nj + j] * values[0][j]).sum::<f64>();
                }
            }
            if let Some((cr, cl)) = &w.modal {
                if e > 0 {
                    add_into(&mut omega_modal[e], cr);
                }
                add_into(&mut omega_modal[e + 1], cl);
                for a in 0..nj {
                    start[e + 1][a] += (0..np).map(|p| pairs[a][p] * cl[p] * projections[0][p]).sum::<f64>();
                }
            }
            if e == 0 {
                let mut r0 = match &w.image {
                    Some((right, _)) => right.clone(),
                    None => vec![0.0; nj * nj],
                };
                if let Some((cr, _)) = &w.modal {
                    for a in 0..nj {
                        for (p, (_, _, hat)) in disc.pair_hat.iter().enumerate() {
                            let c = cr[p] * pairs[a][p];
                            if c != 0.0 {
                                for j in 0..nj {
                                    r0[a * nj + j] += c * hat[j];
                                }
                            }
                        }
                    }
                }
                let mut m = vec![0.0; nj * nj];
                for i in 0..nj {
                    for j in 0..nj {
                        m[i * nj + j] = if i == j { 1.0 } else { 0.0 } - coupling * r0[i * nj + j];
                    }
                }
                lu = Some(Lu::factor(nj, m)?);
            }
        }
    }

    let mut log_m = Vec::with_capacity(panels + 1);
    log_m.push(m0.iter().map(|v| libm::log(*v)).collect::<Vec<f64>>());
    let mut rhs = vec![0.0; nj];
    let mut hist = vec![0.0; nj];
    let mut modal_hist = vec![0.0; np];
    for n in 1..=panels {
        let t = n as f64 * h;
        let reference = scales[n - 1];
        for (a, r) in rhs.iter_mut().enumerate() {
            let d = flow.value(t, disc.nodes[a]);
            *r = if d == 0.0 { 0.0 } else { libm::exp(2.0 * libm::log(d.abs()) - rho * t - reference) };
        }
        if let Some(lu) = &lu {
            hist.iter_mut().for_each(|v| *v = 0.0);
            modal_hist.iter_mut().for_each(|v| *v = 0.0);
            for d in 1..n {
                if omega_image[d].is_none() && omega_modal[d].is_none() {
                    continue;
                }
                let factor = libm::exp((scales[n - d] - reference).min(700.0));
                if factor == 0.0 {
                    continue;
                }
                if let Some(w) = &omega_image[d] {
                    let v = &values[n - d];
                    for a in 0..nj {
                        let row = &w[a * nj..(a + 1) * nj];
                        hist[a] += factor * row.iter().zip(v).map(|(x, y)| x * y).sum::<f64>();
                    }
                }
                if let Some(c) = &omega_modal[d] {
                    for ((acc, cp), y) in modal_hist.iter_mut().zip(c).zip(&projections[n - d]) {
                        *acc += factor * cp * y;
                    }
                }
            }
            let factor0 = libm::exp((scales[0] - reference).min(700.0));
            for a in 0..nj {
                let modal: f64 = pairs[a].iter().zip(&modal_hist).map(|(x, y)| x * y).sum();
                rhs[a] += coupling * (hist[a] + modal + factor0 * start[n][a]);
            }
            rhs = lu.solve(&rhs);
        }
        for (a, v) in rhs.iter_mut().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite { step: n, node: a });
            }
            *v = v.max(0.0);
        }
        let s = rhs.iter().copied().fold(0.0, f64::max);
        let scale = if s > 0.0 { reference + libm::log(s) } else { reference };
        let norm: Vec<f64> = if s > 0.0 { rhs.iter().map(|v| v / s).collect() } else { rhs.clone() };
        log_m.push(norm.iter().map(|v| libm::log(*v) + scale + rho * t).collect());
        if lu.is_some() {
            projections.push(disc.pair_projection(&norm));
        }
        values.push(norm);
        scales.push(scale);
    }
    Ok((disc, log_m))
}

fn add_into(slot: &mut Option<Vec<f64>>, m: &[f64]) {
    match slot {
        Some(v) => v.iter_mut().zip(m).for_each(|(a, b)| *a += b),
        None => *slot = Some(m.to_vec()),
    }
}

/// Solves the second-moment Volterra equation on the configured grid.
pub fn second_moment_volterra(cfg: &OracleConfig) -> Result<MomentField> {
    cfg.validate()?;
    let flow = InitialFlow::new(&cfg.initial, cfg.boundary, cfg.diffusivity)?;
    let (disc, log_m) = solve_resolution(cfg, &flow, cfg.time_panels, cfg.space_nodes)?;
    let log_error = if cfg.estimate_error {
        let (_, fine_t) = solve_resolution(cfg, &flow, 2 * cfg.time_panels, cfg.space_nodes)?;
        let (fine_disc, fine_x) = solve_resolution(cfg, &flow, cfg.time_panels, 2 * cfg.space_nodes + 1)?;
        let mut err = vec![vec![0.0; disc.unknowns()]; cfg.time_panels + 1];
        for (k, row) in err.iter_mut().enumerate() {
            for (a, e) in row.iter_mut().enumerate() {
                let base = log_m[k][a];
                let global = a + disc.offset;
                let fine_index = 2 * global - fine_disc.offset;
                *e = log_gap(base, fine_t[2 * k][a]) + log_gap(base, fine_x[k][fine_index]);
            }
        }
        Some(err)
    } else {
        None
    };
    Ok(MomentField {
        boundary: cfg.boundary,
        diffusivity: cfg.diffusivity,
        lambda: cfg.lambda,
        sigma_slope: cfg.sigma_slope,
        times: (0..=cfg.time_panels).map(|k| k as f64 * disc.step).collect(),
        hat_mass: disc.hat_mass(),
        nodes: disc.nodes,
        log_moment: log_m,
        log_error,
    })
}

fn log_gap(a: f64, b: f64) -> f64 {
    if a == b { 0.0 } else if a.is_finite() && b.is_finite() { (a - b).abs() } else { f64::INFINITY }
}

/// h(t) = min over nodes in [γ, 1−γ] of m(t,·) and H(t) = e^{2νπ²t} h(t), as logs.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Envelope {
    pub times: Vec<f64>,
    pub log_h: Vec<f64>,
    pub log_big_h: Vec<f64>,
    /// The rate 2νπ² used in H.
    pub rate: f64,
    /// Node attaining the minimum at each time.
    pub argmin: Vec<f64>,
}

pub fn lower_bound_envelope(field: &MomentField, margin: f64) -> Result<Envelope> {
    let inside: Vec<usize> = field
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, &x)| x >= margin - 1e-12 && x <= 1.0 - margin + 1e-12)
        .map(|(j, _)| j)
        .collect();
    if inside.is_empty() {
        return Err(domain!("no oracle node inside [{margin}, {}]", 1.0 - margin));
    }
    let rate = 2.0 * field.diffusivity * PI * PI;
    let mut env = Envelope { times: field.times.clone(), log_h: Vec::new(), log_big_h: Vec::new(), rate, argmin: Vec::new() };
    for (k, &t) in field.times.iter().enumerate() {
        let (j, lh) = inside
            .iter()
            .map(|&j| (j, field.log_moment[k][j]))
            .fold((inside[0], f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
        env.log_h.push(lh);
        env.log_big_h.push(lh + rate * t);
        env.argmin.push(field.nodes[j]);
    }
    Ok(env)
}

/// Result of fitting the late-time growth of h against λ⁴K_L⁴.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GrowthCalibration {
    pub lambdas: Vec<f64>,
    /// Late-time slope r(λ) of ln h.
    pub slopes: Vec<f64>,
    pub slope_se: Vec<f64>,
    /// Fitted κ₂ in r + 2νπ² ≈ κ₂ λ⁴K_L⁴.
    pub kappa2: f64,
    pub kappa2_se: f64,
    /// ln κ₁ with κ₁ = min over the window of h·e^{2νπ²t − κ₂λ⁴K_L⁴t}.
    pub log_kappa1: f64,
    pub r2_quartic: f64,
    pub r2_quadratic: f64,
    pub window: (f64, f64),
}

impl GrowthCalibration {
    pub fn quartic_preferred(&self) -> bool {
        self.r2_quartic > self.r2_quadratic
    }
}

/// Late-time slope of ln h over the last `fraction` of the horizon.
pub fn late_slope(env: &Envelope, fraction: f64) -> Result<(f64, f64, (f64, f64))> {
    let window = late_window(&env.times, fraction)?;
    let pts: Vec<FitPoint> = env
        .times
        .iter()
        .zip(&env.log_h)
        .filter(|(t, l)| **t >= window.0 - 1e-12 && l.is_finite())
        .map(|(&t, &l)| FitPoint::new(t, l))
        .collect();
    let fit = fit_line(&pts)?;
    Ok((fit.slope, fit.slope_se, window))
}

pub fn calibrate_growth(runs: &[(f64, Envelope)], lower_constant: f64, fraction: f64) -> Result<GrowthCalibration> {
    if runs.len() < 4 {
        return Err(domain!("need at least 4 noise levels, got {}", runs.len()));
    }
    let mut lambdas = Vec::new();
    let mut slopes = Vec::new();
    let mut ses = Vec::new();
    let mut window = (0.0, 0.0);
    for (lambda, env) in runs {
        let (r, se, w) = late_slope(env, fraction)?;
        lambdas.push(*lambda);
        slopes.push(r);
        ses.push(se);
        window = w;
    }
    let rate = runs[0].1.rate;
    let y: Vec<f64> = slopes.iter().map(|r| r + rate).collect();
    let x4: Vec<f64> = lambdas.iter().map(|l| libm::pow(l * lower_constant, 4.0)).collect();
    let x2: Vec<f64> = lambdas.iter().map(|l| libm::pow(l * lower_constant, 2.0)).collect();
    let quartic = fit_through_origin(&x4, &y)?;
    let quadratic = fit_through_origin(&x2, &y)?;
    if !(quartic.slope > 0.0) {
        return Err(Error::Fit(alloc::format!("fitted κ₂ = {} is not positive", quartic.slope)));
    }
    let mut log_kappa1 = f64::INFINITY;
    for ((_, env), x) in runs.iter().zip(&x4) {
        for (&t, &lh) in env.times.iter().zip(&env.log_h) {
            if t >= window.0 - 1e-12 {
                log_kappa1 = log_kappa1.min(lh + rate * t - quartic.slope * x * t);
            }
        }
    }
    Ok(GrowthCalibration {
        lambdas,
        slopes,
        slope_se: ses,
        kappa2: quartic.slope,
        kappa2_se: quartic.slope_se,
        log_kappa1,
        r2_quartic: quartic.r_squared,
        r2_quadratic: quadratic.r_squared,
        window,
    })
}
