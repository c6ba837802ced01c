//! Heat kernels on [0,1] for the generator ν∂²ₓ, their bounds, and
//! numerical calibration of the constants in those bounds.
//!
//! Two evaluation routes exist for the bounded-domain kernels: the sine
//! (or cosine) eigenfunction series and the method of images. The series
//! is used whenever its certified truncation needs at most
//! [`SERIES_TERM_CAP`] terms; images are used below that time.

use alloc::vec::Vec;
use core::f64::consts::PI;

use crate::error::{domain, Error, Result};
use crate::quad::GaussLegendre;

/// Largest series length evaluated before switching to images.
pub const SERIES_TERM_CAP: usize = 64;

/// Above this value of ν·t the image sum converges slowly; below it the
/// log-domain evaluation prefers images for relative accuracy.
const IMAGE_RELATIVE_LIMIT: f64 = 0.05;

const MAX_IMAGE_SHELLS: usize = 100_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Boundary {
    Dirichlet,
    Neumann,
    Free,
}

/// How a kernel value was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Series { terms: usize },
    Images { shells: usize },
    Closed,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelEval {
    pub value: f64,
    /// Certified bound on the truncation error (rounding excluded).
    pub error_bound: f64,
    pub method: Method,
}

/// Series length chosen for a given time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Truncation {
    pub terms: usize,
    pub tail_bound: f64,
    /// True when `terms` exceeds the cap and images are used instead.
    pub use_images: bool,
    /// Times strictly below this use images.
    pub image_threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KernelSpec {
    boundary: Boundary,
    diffusivity: f64,
    tolerance: f64,
    image_threshold: f64,
}

impl KernelSpec {
    pub fn new(boundary: Boundary, diffusivity: f64, tolerance: f64) -> Result<Self> {
        if !(diffusivity > 0.0 && diffusivity.is_finite()) {
            return Err(domain!("diffusivity must be positive, got {diffusivity}"));
        }
        if !(tolerance > 0.0 && tolerance.is_finite()) {
            return Err(domain!("tolerance must be positive, got {tolerance}"));
        }
        let mut spec = Self { boundary, diffusivity, tolerance, image_threshold: 0.0 };
        spec.image_threshold = spec.find_image_threshold();
        Ok(spec)
    }

    /// Dirichlet kernel at the default tolerance 10⁻¹².
    pub fn dirichlet(diffusivity: f64) -> Result<Self> {
        Self::new(Boundary::Dirichlet, diffusivity, 1e-12)
    }

    pub fn boundary(&self) -> Boundary {
        self.boundary
    }

    pub fn diffusivity(&self) -> f64 {
        self.diffusivity
    }

    pub fn tolerance(&self) -> f64 {
        self.tolerance
    }

    pub fn with_boundary(&self, boundary: Boundary) -> Self {
        Self { boundary, ..*self }
    }

    /// Decay rate ν n² π² of eigenmode `n`.
    pub fn mode_rate(&self, n: usize) -> f64 {
        let nf = n as f64;
        self.diffusivity * nf * nf * PI * PI
    }

    /// Principal Dirichlet eigenvalue ν π².
    pub fn spectral_gap(&self) -> f64 {
        self.mode_rate(1)
    }

    /// K₃ = 2/(1 − e^{-3νπ²}) so that g_D(t,x,y) ≤ K₃ e^{-νπ²t} for t ≥ 1.
    pub fn longtime_constant(&self) -> f64 {
        2.0 / (1.0 - libm::exp(-3.0 * self.spectral_gap()))
    }

    /// 2 Σ_{n>N} e^{-a n²} ≤ 2 e^{-a(N+1)²} / (1 − e^{-a(2N+3)}) with a = νπ²t.
    pub fn tail_bound(&self, t: f64, terms: usize) -> f64 {
        let a = self.spectral_gap() * t;
        let n1 = terms as f64 + 1.0;
        let q = libm::exp(-a * (2.0 * terms as f64 + 3.0));
        if q >= 1.0 {
            return f64::INFINITY;
        }
        2.0 * libm::exp(-a * n1 * n1) / (1.0 - q)
    }

    fn minimal_terms(&self, t: f64) -> usize {
        let a = self.spectral_gap() * t;
        let guess = libm::sqrt(libm::log(2.0 / self.tolerance).max(0.0) / a);
        if !(guess < 1e9) {
            return usize::MAX;
        }
        let mut n = (guess as usize).max(1);
        while n > 1 && self.tail_bound(t, n - 1) < self.tolerance {
            n -= 1;
        }
        while self.tail_bound(t, n) >= self.tolerance {
            n += 1;
        }
        n
    }

    fn find_image_threshold(&self) -> f64 {
        // minimal_terms is nonincreasing in t; bisect in log t.
        let (mut lo, mut hi) = (-60.0_f64, 10.0_f64);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if self.minimal_terms(libm::exp(mid)) <= SERIES_TERM_CAP {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        libm::exp(hi)
    }

    pub fn truncation(&self, t: f64) -> Result<Truncation> {
        check_time(t)?;
        let terms = self.minimal_terms(t);
        Ok(Truncation {
            terms,
            tail_bound: if terms == usize::MAX { f64::INFINITY } else { self.tail_bound(t, terms) },
            use_images: terms > SERIES_TERM_CAP,
            image_threshold: self.image_threshold,
        })
    }

    fn check_positions(&self, x: f64, y: f64) -> Result<()> {
        match self.boundary {
            Boundary::Free => {
                if !(x.is_finite() && y.is_finite()) {
                    return Err(domain!("positions must be finite"));
                }
            }
            _ => {
                if !((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y)) {
                    return Err(domain!("positions ({x}, {y}) outside [0,1]"));
                }
            }
        }
        Ok(())
    }

    /// Kernel value, failing if the certified error exceeds the tolerance.
    pub fn eval(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        let e = self.eval_detailed(t, x, y)?;
        if e.error_bound > self.tolerance {
            return Err(Error::Tolerance { requested: self.tolerance, achieved: e.error_bound });
        }
        Ok(e.value)
    }

    pub fn eval_detailed(&self, t: f64, x: f64, y: f64) -> Result<KernelEval> {
        check_time(t)?;
        self.check_positions(x, y)?;
        if self.boundary == Boundary::Free {
            return Ok(KernelEval { value: free_kernel(self.diffusivity, t, x - y), error_bound: 0.0, method: Method::Closed });
        }
        let mut e = if t < self.image_threshold {
            self.eval_images(t, x, y)?
        } else {
            let terms = self.minimal_terms(t);
            KernelEval {
                value: self.eval_series(t, x, y, terms)?,
                error_bound: self.tail_bound(t, terms),
                method: Method::Series { terms },
            }
        };
        e.value = e.value.max(0.0);
        Ok(e)
    }

    /// The eigenfunction series truncated after `terms` modes.
    pub fn eval_series(&self, t: f64, x: f64, y: f64, terms: usize) -> Result<f64> {
        check_time(t)?;
        self.check_positions(x, y)?;
        let a = self.spectral_gap() * t;
        let (sx, cx) = (libm::sin(PI * x), libm::cos(PI * x));
        let (sy, cy) = (libm::sin(PI * y), libm::cos(PI * y));
        // sin/cos of nπx by angle addition
        let (mut snx, mut cnx) = (0.0, 1.0);
        let (mut sny, mut cny) = (0.0, 1.0);
        let mut sum = 0.0;
        for n in 1..=terms {
            let (s, c) = (snx * cx + cnx * sx, cnx * cx - snx * sx);
            snx = s;
            cnx = c;
            let (s, c) = (sny * cy + cny * sy, cny * cy - sny * sy);
            sny = s;
            cny = c;
            let nf = n as f64;
            let w = libm::exp(-a * nf * nf);
            if w == 0.0 {
                break;
            }
            sum += match self.boundary {
                Boundary::Dirichlet => w * snx * sny,
                Boundary::Neumann => w * cnx * cny,
                Boundary::Free => return Err(Error::Unsupported("free kernel has no eigenfunction series".into())),
            };
        }
        Ok(match self.boundary {
            Boundary::Neumann => 1.0 + 2.0 * sum,
            _ => 2.0 * sum,
        })
    }

    fn image_sign(&self) -> Result<f64> {
        match self.boundary {
            Boundary::Dirichlet => Ok(-1.0),
            Boundary::Neumann => Ok(1.0),
            Boundary::Free => Err(Error::Unsupported("free kernel has no images".into())),
        }
    }

    /// Σ_k [g(x−y+2k) ∓ g(x+y+2k)], summed over shells |k| ≤ K until the
    /// remaining shells are certifiably below a tenth of the tolerance.
    pub fn eval_images(&self, t: f64, x: f64, y: f64) -> Result<KernelEval> {
        check_time(t)?;
        self.check_positions(x, y)?;
        let sign = self.image_sign()?;
        let nu = self.diffusivity;
        let term = |d: f64| free_kernel(nu, t, d);
        let mut sum = term(x - y) + sign * term(x + y);
        let (shells, error_bound) = self.image_shells(t, |k| {
            let kf = 2.0 * k as f64;
            term(x - y + kf) + term(x - y - kf) + sign * (term(x + y + kf) + term(x + y - kf))
        }, &mut sum);
        Ok(KernelEval { value: sum, error_bound, method: Method::Images { shells } })
    }

    /// Adds shells k = 1, 2, … to `sum` and returns (shells used, tail bound).
    fn image_shells<F: FnMut(usize) -> f64>(&self, t: f64, mut shell: F, sum: &mut f64) -> (usize, f64) {
        let four_nu_t = 4.0 * self.diffusivity * t;
        let peak = 1.0 / libm::sqrt(PI * four_nu_t);
        let mut k = 1;
        loop {
            *sum += shell(k);
            k += 1;
            let bound = image_tail(peak, four_nu_t, k);
            if bound < 0.1 * self.tolerance || k > MAX_IMAGE_SHELLS {
                return (k - 1, bound);
            }
        }
    }

    /// ∂ₓ of the kernel by term-wise differentiation of the series,
    /// with a tail bound 2π Σ_{n>N} n e^{-a n²}.
    pub fn dx_series(&self, t: f64, x: f64, y: f64) -> Result<KernelEval> {
        check_time(t)?;
        self.check_positions(x, y)?;
        let a = self.spectral_gap() * t;
        let tail = |n: usize| {
            let n1 = n as f64 + 1.0;
            let q = (n1 + 1.0) / n1 * libm::exp(-a * (2.0 * n1 + 1.0));
            if q >= 1.0 { f64::INFINITY } else { 2.0 * PI * n1 * libm::exp(-a * n1 * n1) / (1.0 - q) }
        };
        let mut terms = 1;
        while tail(terms) >= self.tolerance {
            terms += 1;
            if terms > 10_000_000 {
                return Err(Error::Tolerance { requested: self.tolerance, achieved: tail(terms) });
            }
        }
        let mut sum = 0.0;
        for n in 1..=terms {
            let nf = n as f64;
            let w = libm::exp(-a * nf * nf) * nf * PI;
            sum += match self.boundary {
                Boundary::Dirichlet => w * libm::cos(nf * PI * x) * libm::sin(nf * PI * y),
                Boundary::Neumann => -w * libm::sin(nf * PI * x) * libm::cos(nf * PI * y),
                Boundary::Free => return self.dx_images(t, x, y),
            };
        }
        Ok(KernelEval { value: 2.0 * sum, error_bound: tail(terms), method: Method::Series { terms } })
    }

    /// ∂ₓ of the kernel from the image sum.
    pub fn dx_images(&self, t: f64, x: f64, y: f64) -> Result<KernelEval> {
        check_time(t)?;
        self.check_positions(x, y)?;
        let nu = self.diffusivity;
        let d = |z: f64| -z / (2.0 * nu * t) * free_kernel(nu, t, z);
        if self.boundary == Boundary::Free {
            return Ok(KernelEval { value: d(x - y), error_bound: 0.0, method: Method::Closed });
        }
        let sign = self.image_sign()?;
        let mut sum = d(x - y) + sign * d(x + y);
        // |z| e^{-z²/(4νt)}/(2νt) ≤ e^{-z²/(8νt)} · (2νt)^{-1/2}; reuse the tail with 8νt.
        let inflated = Self { diffusivity: 2.0 * nu, ..*self };
        let (shells, bound) = inflated.image_shells(t, |k| {
            let kf = 2.0 * k as f64;
            d(x - y + kf) + d(x - y - kf) + sign * (d(x + y + kf) + d(x + y - kf))
        }, &mut sum);
        let bound = bound * libm::sqrt(8.0 * PI * nu * t) / (2.0 * nu * t) * libm::sqrt(2.0 * nu * t);
        Ok(KernelEval { value: sum, error_bound: bound, method: Method::Images { shells } })
    }

    /// Natural log of the kernel with relative accuracy, for bounds that
    /// compare exponentially small values. Images are summed in a scaled
    /// form when ν·t is small; the series is used otherwise.
    pub fn ln_eval(&self, t: f64, x: f64, y: f64) -> Result<f64> {
        check_time(t)?;
        self.check_positions(x, y)?;
        let nu = self.diffusivity;
        let four_nu_t = 4.0 * nu * t;
        let ln_peak = -0.5 * libm::log(PI * four_nu_t);
        if self.boundary == Boundary::Free {
            return Ok(ln_peak - (x - y) * (x - y) / four_nu_t);
        }
        if nu * t > IMAGE_RELATIVE_LIMIT {
            let v = self.eval_detailed(t, x, y)?.value;
            return Ok(libm::log(v));
        }
        let sign = self.image_sign()?;
        let lead = (x - y) * (x - y) / four_nu_t;
        let rel = |z: f64| libm::exp(lead - z * z / four_nu_t);
        let mut sum = 1.0 + sign * rel(x + y);
        for k in 1..MAX_IMAGE_SHELLS {
            let kf = 2.0 * k as f64;
            let shell = rel(x - y + kf) + rel(x - y - kf) + sign * (rel(x + y + kf) + rel(x + y - kf));
            sum += shell;
            let far = (2.0 * k as f64) * (2.0 * k as f64) / four_nu_t - lead;
            if far > 745.0 || (shell.abs() < 1e-17 * sum.abs() && k > 1) {
                break;
            }
        }
        Ok(ln_peak - lead + libm::log(sum))
    }

    /// Free-kernel domination and, for t ≥ 1, the long-time bound.
    pub fn upper_bounds(&self, t: f64, x: f64, y: f64) -> Result<UpperBounds> {
        check_time(t)?;
        self.check_positions(x, y)?;
        if self.boundary == Boundary::Neumann {
            return Err(Error::Unsupported("upper bounds are stated for the Dirichlet kernel".into()));
        }
        let free = free_kernel(self.diffusivity, t, x - y);
        let longtime = (self.boundary == Boundary::Dirichlet && t >= 1.0)
            .then(|| self.longtime_constant() * libm::exp(-self.spectral_gap() * t));
        Ok(UpperBounds { free, longtime })
    }

    /// |∫₀¹ g(s,x,y) g(t,y,z) dy − g(s+t,x,z)| with `points` Gauss–Legendre
    /// nodes (16 per panel). The free kernel uses the Gaussian product
    /// reduction, which makes the residual vanish identically.
    pub fn semigroup_residual(&self, s: f64, t: f64, x: f64, z: f64, points: usize) -> Result<f64> {
        check_time(s)?;
        check_time(t)?;
        let target = self.eval(s + t, x, z)?;
        if self.boundary == Boundary::Free {
            let conv = gaussian_convolution_weight(self.diffusivity, s, t, x, z);
            return Ok((conv - target).abs());
        }
        let integral = self.integrate_y(points, |y| Ok(self.eval(s, x, y)? * self.eval(t, y, z)?))?;
        Ok((integral - target).abs())
    }

    /// |∫₀¹ g²(s,y₀,y) dy − g(2s,y₀,y₀)|.
    pub fn squared_identity_residual(&self, s: f64, y0: f64, points: usize) -> Result<f64> {
        check_time(s)?;
        let target = self.eval(2.0 * s, y0, y0)?;
        if self.boundary == Boundary::Free {
            let conv = gaussian_convolution_weight(self.diffusivity, s, s, y0, y0);
            return Ok((conv - target).abs());
        }
        let integral = self.integrate_y(points, |y| {
            let g = self.eval(s, y0, y)?;
            Ok(g * g)
        })?;
        Ok((integral - target).abs())
    }

    fn integrate_y<F: FnMut(f64) -> Result<f64>>(&self, points: usize, mut f: F) -> Result<f64> {
        const PER_PANEL: usize = 16;
        let rule = GaussLegendre::new(PER_PANEL);
        let panels = (points / PER_PANEL).max(1);
        let h = 1.0 / panels as f64;
        let mut total = 0.0;
        for p in 0..panels {
            let lo = p as f64 * h;
            for (y, w) in rule.mapped(lo, lo + h) {
                total += w * f(y)?;
            }
        }
        Ok(total)
    }

    /// ∫₀¹ g(t,x,y) dy by composite Gauss–Legendre.
    pub fn mass(&self, t: f64, x: f64, points: usize) -> Result<f64> {
        self.integrate_y(points, |y| self.eval(t, x, y))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UpperBounds {
    pub free: f64,
    /// K₃ e^{-νπ²t}, present for the Dirichlet kernel when t ≥ 1.
    pub longtime: Option<f64>,
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(domain!("time must be positive and finite, got {t}"))
    }
}

/// (4πνt)^{-1/2} exp(−d²/(4νt)).
pub fn free_kernel(nu: f64, t: f64, d: f64) -> f64 {
    let four_nu_t = 4.0 * nu * t;
    libm::exp(-d * d / four_nu_t) / libm::sqrt(PI * four_nu_t)
}

/// Shells j ≥ k are at distance ≥ 2j − 2; four terms per shell.
fn image_tail(peak: f64, four_nu_t: f64, k: usize) -> f64 {
    if k < 2 {
        return f64::INFINITY;
    }
    let d0 = 2.0 * k as f64 - 2.0;
    let q = libm::exp(-(8.0 * k as f64 - 4.0) / four_nu_t);
    if q >= 1.0 {
        return f64::INFINITY;
    }
    4.0 * peak * libm::exp(-d0 * d0 / four_nu_t) / (1.0 - q)
}

/// ∫_ℝ g(s,x,y) g(t,y,z) dy via g(s)g(t) = g(s+t,x,z)·N(y; m, v) and ∫N = 1.
fn gaussian_convolution_weight(nu: f64, s: f64, t: f64, x: f64, z: f64) -> f64 {
    let normal_mass = 1.0;
    free_kernel(nu, s + t, x - z) * normal_mass
}

/// Constants of the kernel lower bound
/// κ₁ e^{-νπ²t} e^{-κ₂(x−y)²/t} · (t^{-1/2} if t ≤ γ², else 1).
/// At t = γ² the t^{-1/2} branch is used, so the bound drops by the factor
/// γ just after the switch.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LowerBoundSpec {
    margin: f64,
    kappa1: f64,
    kappa2: f64,
}

impl LowerBoundSpec {
    pub fn new(margin: f64, kappa1: f64, kappa2: f64) -> Result<Self> {
        if !(margin > 0.0 && margin < 0.25) {
            return Err(domain!("interior margin must lie in (0, 1/4), got {margin}"));
        }
        if !(kappa1 > 0.0 && kappa2 > 0.0 && kappa1.is_finite() && kappa2.is_finite()) {
            return Err(domain!("lower-bound constants must be positive, got ({kappa1}, {kappa2})"));
        }
        Ok(Self { margin, kappa1, kappa2 })
    }

    pub fn margin(&self) -> f64 {
        self.margin
    }

    pub fn kappa1(&self) -> f64 {
        self.kappa1
    }

    pub fn kappa2(&self) -> f64 {
        self.kappa2
    }

    fn check(&self, t: f64, x: f64, y: f64) -> Result<()> {
        check_time(t)?;
        let band = self.margin..=1.0 - self.margin;
        if !(band.contains(&x) && band.contains(&y)) {
            return Err(domain!("positions ({x}, {y}) outside [{}, {}]", self.margin, 1.0 - self.margin));
        }
        Ok(())
    }

    pub fn value(&self, kernel: &KernelSpec, t: f64, x: f64, y: f64) -> Result<f64> {
        Ok(libm::exp(self.ln_value(kernel, t, x, y)?))
    }

    pub fn ln_value(&self, kernel: &KernelSpec, t: f64, x: f64, y: f64) -> Result<f64> {
        self.check(t, x, y)?;
        Ok(libm::log(self.kappa1) + ln_shape(kernel.spectral_gap(), self.margin, self.kappa2, t, x - y))
    }
}

fn ln_shape(gap: f64, margin: f64, kappa2: f64, t: f64, d: f64) -> f64 {
    let small = if t <= margin * margin { -0.5 * libm::log(t) } else { 0.0 };
    -gap * t - kappa2 * d * d / t + small
}

/// Tensor grid of times and positions used by the calibration routines.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibrationGrid {
    pub times: Vec<f64>,
    pub positions: Vec<f64>,
}

impl CalibrationGrid {
    /// `nt` log-spaced times on [t_lo, t_hi] and `nx` uniform positions on [x_lo, x_hi].
    pub fn new(t_lo: f64, t_hi: f64, nt: usize, x_lo: f64, x_hi: f64, nx: usize) -> Result<Self> {
        if !(t_lo > 0.0 && t_hi >= t_lo && nt >= 1 && nx >= 1 && x_hi >= x_lo) {
            return Err(domain!("invalid calibration grid"));
        }
        let times = (0..nt)
            .map(|i| if nt == 1 { t_lo } else { t_lo * libm::pow(t_hi / t_lo, i as f64 / (nt - 1) as f64) })
            .collect();
        let positions = (0..nx)
            .map(|i| if nx == 1 { x_lo } else { x_lo + (x_hi - x_lo) * i as f64 / (nx - 1) as f64 })
            .collect();
        Ok(Self { times, positions })
    }

    fn nodes(&self) -> impl Iterator<Item = (f64, f64, f64)> + '_ {
        self.times.iter().flat_map(move |&t| {
            self.positions.iter().flat_map(move |&x| self.positions.iter().map(move |&y| (t, x, y)))
        })
    }
}

/// Calibrated lower-bound constants and the margin by which they hold.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowerBoundCalibration {
    pub bound: LowerBoundSpec,
    /// min over the grid of kernel / bound; at least 1 by construction.
    pub min_ratio: f64,
    pub nodes: usize,
}

/// Geometric candidates for an exponent constant.
fn exponent_candidates(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo * libm::pow(hi / lo, i as f64 / (n - 1) as f64)).collect()
}

/// For each κ₂ on a geometric scan, κ₁(κ₂) is the largest constant for
/// which the bound holds at every node. κ₁ grows with κ₂, so the pair
/// chosen is the smallest κ₂ whose κ₁ is within a factor 2 of the value
/// at the top of the scan.
pub fn calibrate_lower_bound(kernel: &KernelSpec, margin: f64, grid: &CalibrationGrid) -> Result<LowerBoundCalibration> {
    if kernel.boundary() != Boundary::Dirichlet {
        return Err(Error::Unsupported("lower-bound calibration targets the Dirichlet kernel".into()));
    }
    LowerBoundSpec::new(margin, 1.0, 1.0)?;
    let gap = kernel.spectral_gap();
    let mut nodes = Vec::new();
    for (t, x, y) in grid.nodes() {
        if x < margin || x > 1.0 - margin || y < margin || y > 1.0 - margin {
            continue;
        }
        nodes.push((t, x - y, kernel.ln_eval(t, x, y)?));
    }
    if nodes.is_empty() {
        return Err(domain!("calibration grid has no nodes inside the margin"));
    }
    let ln_kappa1 = |k2: f64| {
        nodes.iter().map(|&(t, d, lg)| lg - ln_shape(gap, margin, k2, t, d)).fold(f64::INFINITY, f64::min)
    };
    let scale = 1.0 / (4.0 * kernel.diffusivity());
    let candidates = exponent_candidates(1e-2 * scale, 1e2 * scale, 121);
    let top = ln_kappa1(*candidates.last().unwrap_or(&scale));
    let kappa2 = candidates
        .iter()
        .copied()
        .find(|&k2| ln_kappa1(k2) >= top - core::f64::consts::LN_2)
        .unwrap_or(scale);
    let ln_k1 = ln_kappa1(kappa2) - 1e-12;
    let bound = LowerBoundSpec::new(margin, libm::exp(ln_k1), kappa2)?;
    let min_ratio = nodes
        .iter()
        .map(|&(t, d, lg)| libm::exp(lg - ln_k1 - ln_shape(gap, margin, kappa2, t, d)))
        .fold(f64::INFINITY, f64::min);
    Ok(LowerBoundCalibration { bound, min_ratio, nodes: nodes.len() })
}

/// Fitted constants of |∂ₓ g| ≤ K₁ t⁻¹ e^{-K₂(x−y)²/t}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeBoundFit {
    pub k1: f64,
    pub k2: f64,
    pub nodes: usize,
    /// max over the grid of |∂ₓ g| / bound; at most 1 by construction.
    pub max_ratio: f64,
}

/// For each K₂ below the Gaussian rate 1/(4ν), K₁(K₂) is the smallest
/// constant that works at every node. K₁ grows with K₂; the chosen K₂ is
/// the largest one whose K₁ stays within a factor 2 of the K₁ at the
/// bottom of the scan.
pub fn fit_dx_bound(kernel: &KernelSpec, grid: &CalibrationGrid) -> Result<DerivativeBoundFit> {
    if kernel.boundary() != Boundary::Dirichlet {
        return Err(Error::Unsupported("derivative bound is stated for the Dirichlet kernel".into()));
    }
    let nu = kernel.diffusivity();
    let mut nodes = Vec::new();
    for (t, x, y) in grid.nodes() {
        let ln_abs = ln_abs_dx(kernel, t, x, y)?;
        if ln_abs.is_finite() {
            nodes.push((t, x - y, ln_abs));
        }
    }
    if nodes.is_empty() {
        return Err(domain!("derivative vanishes on every grid node"));
    }
    let ln_k1 = |k2: f64| {
        nodes
            .iter()
            .map(|&(t, d, la)| la + libm::log(t) + k2 * d * d / t)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let rate = 1.0 / (4.0 * nu);
    let candidates = exponent_candidates(1e-4 * rate, 0.999 * rate, 121);
    let base = ln_k1(candidates[0]);
    let k2 = candidates
        .iter()
        .rev()
        .copied()
        .find(|&k2| ln_k1(k2) <= base + core::f64::consts::LN_2)
        .unwrap_or(candidates[0]);
    let lk1 = ln_k1(k2) + 1e-12;
    if !lk1.is_finite() {
        return Err(Error::Fit("derivative bound constant is not finite".into()));
    }
    let max_ratio = nodes
        .iter()
        .map(|&(t, d, la)| libm::exp(la + libm::log(t) + k2 * d * d / t - lk1))
        .fold(0.0, f64::max);
    Ok(DerivativeBoundFit { k1: libm::exp(lk1), k2, nodes: nodes.len(), max_ratio })
}

/// ln|∂ₓ g_D| with relative accuracy; images in scaled form for small ν·t.
fn ln_abs_dx(kernel: &KernelSpec, t: f64, x: f64, y: f64) -> Result<f64> {
    let nu = kernel.diffusivity();
    if nu * t > IMAGE_RELATIVE_LIMIT {
        return Ok(libm::log(kernel.dx_series(t, x, y)?.value.abs()));
    }
    let four_nu_t = 4.0 * nu * t;
    let sign = kernel.image_sign()?;
    let centres = |k: f64| [(x - y + k, 1.0), (x + y + k, sign)];
    let mut lead = f64::INFINITY;
    for k in [-2.0, 0.0, 2.0] {
        for (z, _) in centres(k) {
            lead = lead.min(z * z / four_nu_t);
        }
    }
    let mut sum = 0.0;
    for k in -8i32..=8 {
        for (z, s) in centres(2.0 * k as f64) {
            sum += s * (-z) * libm::exp(lead - z * z / four_nu_t);
        }
    }
    let ln_pref = -libm::log(2.0 * nu * t) - 0.5 * libm::log(PI * four_nu_t);
    Ok(ln_pref - lead + libm::log(sum.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dirichlet() -> KernelSpec {
        KernelSpec::dirichlet(0.5).unwrap()
    }

    #[test]
    fn vanishes_on_boundary() {
        let k = dirichlet();
        for &t in &[1e-4, 1e-2, 0.3, 5.0] {
            assert_eq!(k.eval(t, 0.0, 0.4).unwrap(), 0.0);
        }
    }

    #[test]
    fn rejects_bad_time() {
        assert!(matches!(dirichlet().eval(0.0, 0.5, 0.5), Err(Error::Domain(_))));
        assert!(dirichlet().eval(-1.0, 0.5, 0.5).is_err());
    }

    #[test]
    fn symmetric_in_positions() {
        let k = dirichlet();
        let a = k.eval(0.1, 0.3, 0.7).unwrap();
        let b = k.eval(0.1, 0.7, 0.3).unwrap();
        assert!((a - b).abs() <= 2.0 * k.tolerance());
    }

    #[test]
    fn series_and_images_agree_at_small_time() {
        let k = dirichlet();
        let t = 1e-3;
        let terms = k.minimal_terms(t);
        let series = k.eval_series(t, 0.5, 0.5, terms).unwrap();
        let images = k.eval_images(t, 0.5, 0.5).unwrap().value;
        assert!((series - images).abs() < 1e-10, "{series} {images}");
    }

    #[test]
    fn truncation_examples() {
        let k = dirichlet();
        let tr = k.truncation(1.0).unwrap();
        assert!(tr.terms <= 5 && !tr.use_images);
        assert!(k.tail_bound(1.0, 5) < 1e-12);
        assert_eq!(k.truncation(50.0).unwrap().terms, 1);
        let small = k.truncation(1e-4).unwrap();
        assert!(small.use_images && small.terms > SERIES_TERM_CAP);
        assert!(small.image_threshold > 1e-4 && small.image_threshold < 1e-2);
    }

    #[test]
    fn free_peak_value() {
        let k = dirichlet();
        let b = k.upper_bounds(1.0, 0.5, 0.5).unwrap();
        assert!((b.free - 1.0 / libm::sqrt(2.0 * PI)).abs() < 1e-15);
        assert!(b.longtime.is_some());
        assert!(k.upper_bounds(0.5, 0.5, 0.5).unwrap().longtime.is_none());
    }

    #[test]
    fn dx_vanishes_on_diagonal_centre() {
        let k = dirichlet();
        assert!(k.dx_series(0.1, 0.5, 0.5).unwrap().value.abs() < 1e-12);
    }

    #[test]
    fn dx_matches_finite_difference() {
        let k = dirichlet();
        let (t, x, y) = (0.05, 0.25, 0.75);
        let h = 1e-5;
        let fd = (k.eval(t, x + h, y).unwrap() - k.eval(t, x - h, y).unwrap()) / (2.0 * h);
        let d = k.dx_series(t, x, y).unwrap().value;
        assert!(((d - fd) / d).abs() < 1e-6, "{d} {fd}");
        let di = k.dx_images(t, x, y).unwrap().value;
        assert!((d - di).abs() < 1e-10);
    }

    #[test]
    fn ln_eval_matches_direct_where_both_resolve() {
        let k = dirichlet();
        for &(t, x, y) in &[(0.01, 0.3, 0.5), (0.09, 0.2, 0.8), (0.5, 0.4, 0.6)] {
            let direct = libm::log(k.eval(t, x, y).unwrap());
            assert!((k.ln_eval(t, x, y).unwrap() - direct).abs() < 1e-9);
        }
    }

    #[test]
    fn neumann_constant_and_free_semigroup() {
        let n = KernelSpec::new(Boundary::Neumann, 0.5, 1e-12).unwrap();
        assert!((n.eval(30.0, 0.1, 0.9).unwrap() - 1.0).abs() < 1e-12);
        let f = KernelSpec::new(Boundary::Free, 0.5, 1e-12).unwrap();
        assert_eq!(f.semigroup_residual(0.1, 0.2, -0.3, 1.7, 0).unwrap(), 0.0);
    }

    #[test]
    fn lower_bound_switch_convention() {
        let k = dirichlet();
        let lb = LowerBoundSpec::new(0.2, 1.0, 1.0).unwrap();
        let g2 = 0.04;
        let at = lb.value(&k, g2, 0.5, 0.5).unwrap();
        let after = lb.value(&k, g2 * (1.0 + 1e-12), 0.5, 0.5).unwrap();
        assert!((at * 0.2 / after - 1.0).abs() < 1e-9);
        assert!(lb.value(&k, 0.1, 0.1, 0.5).is_err());
        assert!(LowerBoundSpec::new(0.25, 1.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn nonnegative_and_dominated(t in 1e-4f64..10.0, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            let k = dirichlet();
            let g = k.eval(t, x, y).unwrap();
            prop_assert!(g >= -k.tolerance());
            let free = k.upper_bounds(t, x, y).unwrap().free;
            prop_assert!(g <= free + 2.0 * k.tolerance());
        }

        #[test]
        fn routes_agree(lt in -4.0f64..1.0, x in 0.0f64..=1.0, y in 0.0f64..=1.0) {
            let k = dirichlet();
            let t = libm::pow(10.0, lt);
            let terms = k.minimal_terms(t);
            let s = k.eval_series(t, x, y, terms).unwrap();
            let i = k.eval_images(t, x, y).unwrap().value;
            prop_assert!((s - i).abs() < 1e-10);
        }
    }
}
