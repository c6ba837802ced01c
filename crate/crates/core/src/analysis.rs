//! Rate fits (Lyapunov exponents, excitation index), the threshold scan,
//! and numerical checks of the kernel integral bounds.

use alloc::vec::Vec;

use crate::error::{domain, Error, Result};
use crate::kernel::{Boundary, KernelSpec};
use crate::quad::GaussLegendre;
use core::f64::consts::PI;
use crate::stats::MomentEstimate;

/// Two-sided 95% normal quantile; the default significance multiplier.
pub const Z_95: f64 = 1.959_963_984_540_054;

/// A point with an optional standard deviation for its ordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FitPoint {
    pub x: f64,
    pub y: f64,
    /// Standard deviation of `y`; `None` for unit weight.
    pub sd: Option<f64>,
}

impl FitPoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y, sd: None }
    }

    pub fn with_sd(x: f64, y: f64, sd: f64) -> Self {
        Self { x, y, sd: Some(sd) }
    }

    fn weight(&self) -> f64 {
        match self.sd {
            Some(s) if s > 0.0 && s.is_finite() => 1.0 / (s * s),
            // exact points dominate but must stay finite
            Some(0.0) => 1e30,
            _ => 1.0,
        }
    }
}

/// Weighted least-squares straight line.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LineFit {
    pub slope: f64,
    pub intercept: f64,
    pub slope_se: f64,
    pub intercept_se: f64,
    /// Weighted, centred coefficient of determination.
    pub r_squared: f64,
    /// χ²/(n − 2); the standard errors are inflated by max(1, this) when
    /// per-point deviations are given.
    pub reduced_chi2: f64,
    pub n: usize,
}

impl LineFit {
    pub fn slope_ci(&self, z: f64) -> f64 {
        z * self.slope_se
    }

    pub fn significantly_negative(&self, z: f64) -> bool {
        self.slope + self.slope_ci(z) < 0.0
    }

    pub fn significantly_positive(&self, z: f64) -> bool {
        self.slope - self.slope_ci(z) > 0.0
    }
}

/// Fits y = intercept + slope·x. Points with non-finite coordinates are
/// rejected with a fit error; filter them beforehand when dropping is wanted.
pub fn fit_line(points: &[FitPoint]) -> Result<LineFit> {
    let n = points.len();
    if n < 3 {
        return Err(Error::Fit(alloc::format!("need at least 3 points, got {n}")));
    }
    if points.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(Error::Fit("non-finite point in fit".into()));
    }
    let weighted = points.iter().any(|p| p.sd.is_some());
    let sw: f64 = points.iter().map(FitPoint::weight).sum();
    let xm = points.iter().map(|p| p.weight() * p.x).sum::<f64>() / sw;
    let ym = points.iter().map(|p| p.weight() * p.y).sum::<f64>() / sw;
    let (mut sxx, mut sxy, mut syy) = (0.0, 0.0, 0.0);
    for p in points {
        let w = p.weight();
        let (dx, dy) = (p.x - xm, p.y - ym);
        sxx += w * dx * dx;
        sxy += w * dx * dy;
        syy += w * dy * dy;
    }
    if !(sxx > 0.0) {
        return Err(Error::Fit("degenerate abscissae".into()));
    }
    let slope = sxy / sxx;
    let intercept = ym - slope * xm;
    let chi2: f64 = points
        .iter()
        .map(|p| {
            let r = p.y - intercept - slope * p.x;
            p.weight() * r * r
        })
        .sum();
    let reduced_chi2 = chi2 / (n - 2) as f64;
    let scale = if weighted { reduced_chi2.max(1.0) } else { reduced_chi2 };
    let slope_var = scale / sxx;
    let intercept_var = scale * (1.0 / sw + xm * xm / sxx);
    let r_squared = if syy > 0.0 { 1.0 - chi2 / syy } else { 1.0 };
    Ok(LineFit {
        slope,
        intercept,
        slope_se: libm::sqrt(slope_var),
        intercept_se: libm::sqrt(intercept_var),
        r_squared,
        reduced_chi2,
        n,
    })
}

/// Least squares y = slope·x through the origin.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OriginFit {
    pub slope: f64,
    pub slope_se: f64,
    /// 1 − SSR/SST with SST centred on the mean of y, so that models with
    /// different regressors on the same data compare directly.
    pub r_squared: f64,
    pub n: usize,
}

pub fn fit_through_origin(x: &[f64], y: &[f64]) -> Result<OriginFit> {
    let n = x.len();
    if n != y.len() {
        return Err(Error::Mismatch("abscissa and ordinate lengths differ".into()));
    }
    if n < 2 {
        return Err(Error::Fit("need at least 2 points".into()));
    }
    let sxx: f64 = x.iter().map(|v| v * v).sum();
    if !(sxx > 0.0 && sxx.is_finite()) {
        return Err(Error::Fit("degenerate regressor".into()));
    }
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    let slope = sxy / sxx;
    let ssr: f64 = x.iter().zip(y).map(|(a, b)| (b - slope * a) * (b - slope * a)).sum();
    let ym = y.iter().sum::<f64>() / n as f64;
    let sst: f64 = y.iter().map(|b| (b - ym) * (b - ym)).sum();
    let slope_se = libm::sqrt(ssr / (n - 1) as f64 / sxx);
    let r_squared = if sst > 0.0 { 1.0 - ssr / sst } else { 1.0 };
    Ok(OriginFit { slope, slope_se, r_squared, n })
}

/// Indices of the points whose abscissa lies in the last `fraction` of the range.
pub fn late_window(xs: &[f64], fraction: f64) -> Result<(f64, f64)> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(domain!("window fraction must lie in (0, 1], got {fraction}"));
    }
    let lo = xs.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Fit("empty abscissa range".into()));
    }
    Ok((hi - fraction * (hi - lo), hi))
}

/// What the fitted abscissa measures.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Abscissa {
    Time,
    LogLambda,
}

/// A slope fitted over a window, with the points that entered it.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct RateFit {
    pub abscissa: Abscissa,
    pub points: Vec<FitPoint>,
    /// Abscissae of points dropped for non-finite or out-of-domain values.
    pub dropped: Vec<f64>,
    pub window: (f64, f64),
    pub slope: f64,
    /// Half-width z·se of the slope interval.
    pub slope_ci: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub z: f64,
    pub line: LineFit,
}

impl RateFit {
    pub fn significantly_negative(&self) -> bool {
        self.slope + self.slope_ci < 0.0
    }

    pub fn significantly_positive(&self) -> bool {
        self.slope - self.slope_ci > 0.0
    }

    pub fn ci_overlaps(&self, other: &RateFit) -> bool {
        (self.slope - other.slope).abs() <= self.slope_ci + other.slope_ci
    }
}

/// Weighted fit of the points inside `window`; non-finite ordinates are
/// dropped and listed.
pub fn fit_rate(abscissa: Abscissa, points: &[FitPoint], window: (f64, f64), z: f64) -> Result<RateFit> {
    if !(z > 0.0) {
        return Err(domain!("significance multiplier must be positive, got {z}"));
    }
    let slack = 1e-12 * window.1.abs().max(1.0);
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for p in points.iter().filter(|p| p.x >= window.0 - slack && p.x <= window.1 + slack) {
        let sd_ok = p.sd.is_none_or(|s| s.is_finite());
        if p.y.is_finite() && sd_ok {
            kept.push(*p);
        } else {
            dropped.push(p.x);
        }
    }
    if kept.len() < 3 {
        return Err(Error::Fit(alloc::format!("{} usable points in window, need 3", kept.len())));
    }
    let line = fit_line(&kept)?;
    Ok(RateFit {
        abscissa,
        points: kept,
        dropped,
        window,
        slope: line.slope,
        slope_ci: line.slope_ci(z),
        intercept: line.intercept,
        r_squared: line.r_squared,
        z,
        line,
    })
}

/// Finite-horizon Lyapunov exponent: weighted fit of ln E[F] against t,
/// using each estimate's log-scale interval as its weight.
pub fn lyapunov_exponent(series: &[MomentEstimate], window: (f64, f64), z: f64) -> Result<RateFit> {
    let Some(first) = series.first() else {
        return Err(Error::Fit("empty moment series".into()));
    };
    if series.iter().any(|e| e.functional() != first.functional()) {
        return Err(Error::Mismatch("series mixes functionals".into()));
    }
    let points: Vec<FitPoint> = series
        .iter()
        .map(|e| {
            let half = e.log_ci_half_width();
            let sd = if half.is_finite() { half / Z_95 } else { 0.0 };
            FitPoint::with_sd(e.t(), e.log_mean(), sd)
        })
        .collect();
    fit_rate(Abscissa::Time, &points, window, z)
}

/// ln E_p at one noise level, with an optional standard deviation of ln E_p.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnergyPoint {
    pub lambda: f64,
    pub log_energy: f64,
    pub log_energy_sd: Option<f64>,
}

/// Excitation index fit and the quartic-versus-quadratic diagnostic.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ExcitationFit {
    /// Slope of ln ln E_p against ln λ: the estimate ê_p.
    pub index: RateFit,
    /// ln E_p against λ⁴.
    pub quartic: LineFit,
    /// ln E_p against λ².
    pub quadratic: LineFit,
    /// Noise levels with E_p ≤ 1, excluded from the log-log fit.
    pub flagged: Vec<f64>,
}

impl ExcitationFit {
    pub fn quartic_preferred(&self) -> bool {
        self.quartic.r_squared > self.quadratic.r_squared
    }
}

fn is_geometric(lambdas: &[f64]) -> bool {
    let r = lambdas[1] / lambdas[0];
    r > 1.0 && lambdas.windows(2).all(|w| ((w[1] / w[0]) / r - 1.0).abs() < 1e-6)
}

pub fn excitation_index(points: &[EnergyPoint], z: f64) -> Result<ExcitationFit> {
    if points.len() < 4 {
        return Err(domain!("need at least 4 noise levels, got {}", points.len()));
    }
    let lambdas: Vec<f64> = points.iter().map(|p| p.lambda).collect();
    if lambdas.iter().any(|l| !(*l > 0.0)) || !is_geometric(&lambdas) {
        return Err(Error::Fit("noise levels must form an increasing geometric grid".into()));
    }
    let mut loglog = Vec::new();
    let mut flagged = Vec::new();
    for p in points {
        if p.log_energy > 0.0 && p.log_energy.is_finite() {
            let y = libm::log(p.log_energy);
            let fp = match p.log_energy_sd {
                Some(sd) => FitPoint::with_sd(libm::log(p.lambda), y, sd / p.log_energy),
                None => FitPoint::new(libm::log(p.lambda), y),
            };
            loglog.push(fp);
        } else {
            flagged.push(p.lambda);
        }
    }
    let lo = libm::log(lambdas[0]);
    let hi = libm::log(lambdas[lambdas.len() - 1]);
    let index = fit_rate(Abscissa::LogLambda, &loglog, (lo, hi), z)?;
    let direct = |power: f64| {
        let pts: Vec<FitPoint> = points
            .iter()
            .filter(|p| p.log_energy.is_finite())
            .map(|p| FitPoint::new(libm::pow(p.lambda, power), p.log_energy))
            .collect();
        fit_line(&pts)
    };
    Ok(ExcitationFit { index, quartic: direct(4.0)?, quadratic: direct(2.0)?, flagged })
}

/// Empirical stability and growth thresholds over a λ grid.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Thresholds {
    /// Largest λ whose slope is significantly negative.
    pub lambda_lower: Option<f64>,
    /// Smallest λ whose slope is significantly positive.
    pub lambda_upper: Option<f64>,
}

impl Thresholds {
    /// λ_L̂ ≤ λ_Û when both exist; vacuously true for a one-sided scan.
    pub fn ordered(&self) -> bool {
        match (self.lambda_lower, self.lambda_upper) {
            (Some(l), Some(u)) => l <= u,
            _ => true,
        }
    }

    pub fn two_sided(&self) -> bool {
        self.lambda_lower.is_some() && self.lambda_upper.is_some()
    }
}

pub fn threshold_scan(fits: &[(f64, RateFit)]) -> Thresholds {
    let lambda_lower = fits
        .iter()
        .filter(|(_, f)| f.significantly_negative())
        .map(|(l, _)| *l)
        .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.max(l))));
    let lambda_upper = fits
        .iter()
        .filter(|(_, f)| f.significantly_positive())
        .map(|(l, _)| *l)
        .fold(None, |acc: Option<f64>, l| Some(acc.map_or(l, |a| a.min(l))));
    Thresholds { lambda_lower, lambda_upper }
}

/// Quadrature resolution for [`integral_functional`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntegralResolution {
    /// Panels in v = s^{(1−α)/2} on [0, min(t, 1)].
    pub short_panels: usize,
    /// Panels per growth step on [1, t]; widths grow geometrically.
    pub long_panels: usize,
    /// Panels in y on each side of x.
    pub y_panels: usize,
}

impl Default for IntegralResolution {
    fn default() -> Self {
        Self { short_panels: 8, long_panels: 1, y_panels: 6 }
    }
}

impl IntegralResolution {
    pub fn refined(&self) -> Self {
        Self { short_panels: 2 * self.short_panels, long_panels: 2 * self.long_panels, y_panels: 2 * self.y_panels }
    }
}

/// Above this ν·s the integrand is evaluated with the first-mode decay
/// factored out, so that e^{βs} and the kernel power never over- or underflow.
const SCALED_FROM: f64 = 0.5;

/// e^{νπ²s}·g_D(s, x, y) from the sine series; only used for ν·s ≥ SCALED_FROM,
/// where a handful of terms reach double precision.
fn scaled_dirichlet(nu: f64, s: f64, x: f64, y: f64) -> f64 {
    let gap = nu * PI * PI * s;
    let mut total = 0.0;
    for n in 1.. {
        let nf = n as f64;
        let expo = (nf * nf - 1.0) * gap;
        if expo > 45.0 {
            break;
        }
        total += 2.0 * libm::exp(-expo) * libm::sin(nf * PI * x) * libm::sin(nf * PI * y);
    }
    total.max(0.0)
}

/// ∫₀¹ g(s, x, y)^power dy, integrated on both sides of x over the part of
/// [0, 1] within twelve kernel widths. Returns (value, log_factor): the
/// integral equals value·e^{log_factor}.
fn kernel_power_integral(kernel: &KernelSpec, s: f64, x: f64, power: f64, panels: usize, rule: &GaussLegendre) -> Result<(f64, f64)> {
    let nu = kernel.diffusivity();
    let w = 12.0 * libm::sqrt(2.0 * nu * s);
    let (a, b) = ((x - w).max(0.0), (x + w).min(1.0));
    let scaled = nu * s >= SCALED_FROM;
    let mut err = None;
    let mut f = |y: f64| {
        if scaled {
            return libm::pow(scaled_dirichlet(nu, s, x, y), power);
        }
        match kernel.eval_detailed(s, x, y) {
            Ok(e) => libm::pow(e.value, power),
            Err(e) => {
                err = Some(e);
                0.0
            }
        }
    };
    let mut total = 0.0;
    if x > a {
        total += rule.composite(a, x, panels, &mut f);
    }
    if b > x {
        total += rule.composite(x, b, panels, &mut f);
    }
    let log_factor = if scaled { -power * kernel.spectral_gap() * s } else { 0.0 };
    match err {
        Some(e) => Err(e),
        None => Ok((total, log_factor)),
    }
}

/// I(t, x; α, β) = ∫₀ᵗ e^{βs} s^{−α} ∫₀¹ g(s, x, y)^{2−α} dy ds.
///
/// The substitution s = v^q, q = 2/(1−α), removes the s^{−(1+α)/2}
/// endpoint singularity on [0, 1]; beyond s = 1 the integrand decays like
/// e^{(β−(2−α)νπ²)s} and is integrated on geometrically growing panels
/// until it is negligible.
pub fn integral_functional(kernel: &KernelSpec, alpha: f64, beta: f64, t: f64, x: f64, res: IntegralResolution) -> Result<f64> {
    if kernel.boundary() != Boundary::Dirichlet {
        return Err(Error::Unsupported("integral bounds are stated for the Dirichlet kernel".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain!("α must lie in (0, 1), got {alpha}"));
    }
    if !(t >= 0.0 && t.is_finite()) || !(0.0..=1.0).contains(&x) {
        return Err(domain!("need t ≥ 0 and x in [0, 1]"));
    }
    if t == 0.0 {
        return Ok(0.0);
    }
    let rule = GaussLegendre::new(16);
    let power = 2.0 - alpha;
    let integrand = |s: f64| -> Result<f64> {
        let (v, log_factor) = kernel_power_integral(kernel, s, x, power, res.y_panels, &rule)?;
        Ok(libm::exp(beta * s + log_factor) * libm::pow(s, -alpha) * v)
    };
    let q = 2.0 / (1.0 - alpha);
    let s1 = t.min(1.0);
    let v1 = libm::pow(s1, 1.0 / q);
    let mut total = 0.0;
    let hv = v1 / res.short_panels as f64;
    for k in 0..res.short_panels {
        for (v, w) in rule.mapped(k as f64 * hv, (k + 1) as f64 * hv) {
            let s = libm::pow(v, q);
            total += w * q * libm::pow(v, q - 1.0) * integrand(s)?;
        }
    }
    let rate = (beta - power * kernel.spectral_gap()).min(-1e-3);
    let cap = 2.0 / (-rate);
    let mut a = s1;
    let mut width: f64 = 0.25;
    while a < t && rate * (a - 1.0) > -45.0 {
        let b = (a + width.min(cap)).min(t);
        let h = (b - a) / res.long_panels as f64;
        for k in 0..res.long_panels {
            for (s, w) in rule.mapped(a + k as f64 * h, a + (k + 1) as f64 * h) {
                total += w * integrand(s)?;
            }
        }
        a = b;
        width *= 1.5;
    }
    Ok(total)
}

/// Which integral bound a β belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum BoundRegime {
    /// β < 0: sup ≤ C|β|^{(α−1)/2}.
    Negative,
    /// 0 < β < (2−α)νπ²: sup ≤ C(β^{(α−1)/2} + 1/((2−α)νπ² − β)).
    BelowThreshold,
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntegralBoundRow {
    pub beta: f64,
    /// sup over the (t, x) grid, attained at t = t_max since I is nondecreasing in t.
    pub sup: f64,
    pub argmax_x: f64,
    pub shape: f64,
    pub implied_constant: f64,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct IntegralBoundReport {
    pub alpha: f64,
    pub regime: BoundRegime,
    /// (2−α)νπ².
    pub threshold: f64,
    pub t_max: f64,
    /// Rows at the finest resolution.
    pub rows: Vec<IntegralBoundRow>,
    /// Implied constants per refinement level, [level][β].
    pub constants_by_level: Vec<Vec<f64>>,
    /// Largest relative change of an implied constant at the final refinement.
    pub refinement_change: f64,
    /// Log-log slopes of sup between consecutive β against |β| (negative
    /// regime) or against the distance to the threshold.
    pub exponents: Vec<f64>,
    /// The exponent the bound shape predicts.
    pub expected_exponent: f64,
}

impl IntegralBoundReport {
    /// Every consecutive exponent within `rel` of the predicted one.
    pub fn exponents_match(&self, rel: f64) -> bool {
        !self.exponents.is_empty()
            && self.exponents.iter().all(|e| ((e - self.expected_exponent) / self.expected_exponent).abs() <= rel)
    }

    pub fn all_finite(&self) -> bool {
        self.rows.iter().all(|r| r.sup.is_finite() && r.implied_constant.is_finite())
    }
}

/// Evaluates the kernel integral on x ∈ {½k/n_x : k = 1..n_x} (the integral
/// is symmetric about ½) at t = t_max, for every β, over `levels`
/// resolutions that double the quadrature and the x grid each time.
pub fn verify_integral_bounds(
    kernel: &KernelSpec,
    alpha: f64,
    betas: &[f64],
    t_max: f64,
    x_points: usize,
    base: IntegralResolution,
    levels: usize,
) -> Result<IntegralBoundReport> {
    if kernel.boundary() != Boundary::Dirichlet {
        return Err(Error::Unsupported("integral bounds are stated for the Dirichlet kernel".into()));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(domain!("α must lie in (0, 1), got {alpha}"));
    }
    if betas.len() < 2 || x_points == 0 || levels == 0 {
        return Err(domain!("need at least 2 values of β, one x point and one level"));
    }
    let threshold = (2.0 - alpha) * kernel.spectral_gap();
    let regime = if betas.iter().all(|b| *b < 0.0) {
        BoundRegime::Negative
    } else if betas.iter().all(|b| *b > 0.0 && *b < threshold) {
        BoundRegime::BelowThreshold
    } else {
        return Err(domain!("β values must all be negative or all lie in (0, {threshold})"));
    };
    let e = (alpha - 1.0) / 2.0;
    let shape = |b: f64| match regime {
        BoundRegime::Negative => libm::pow(-b, e),
        BoundRegime::BelowThreshold => libm::pow(b, e) + 1.0 / (threshold - b),
    };
    let mut res = base;
    let mut nx = x_points;
    let mut constants_by_level = Vec::with_capacity(levels);
    let mut rows = Vec::new();
    for _ in 0..levels {
        rows.clear();
        for &beta in betas {
            let mut best = (f64::NEG_INFINITY, 0.0);
            for k in 1..=nx {
                let x = 0.5 * k as f64 / nx as f64;
                let v = integral_functional(kernel, alpha, beta, t_max, x, res)?;
                if !v.is_finite() {
                    return Err(Error::Divergent(alloc::format!("integral not finite at β = {beta}, x = {x}")));
                }
                if v > best.0 {
                    best = (v, x);
                }
            }
            let sh = shape(beta);
            rows.push(IntegralBoundRow { beta, sup: best.0, argmax_x: best.1, shape: sh, implied_constant: best.0 / sh });
        }
        constants_by_level.push(rows.iter().map(|r| r.implied_constant).collect::<Vec<_>>());
        res = res.refined();
        nx *= 2;
    }
    let refinement_change = if levels >= 2 {
        let last = &constants_by_level[levels - 1];
        let prev = &constants_by_level[levels - 2];
        last.iter().zip(prev).map(|(a, b)| ((a - b) / a).abs()).fold(0.0, f64::max)
    } else {
        f64::NAN
    };
    let distance = |b: f64| match regime {
        BoundRegime::Negative => -b,
        BoundRegime::BelowThreshold => threshold - b,
    };
    let exponents = rows
        .windows(2)
        .map(|w| libm::log(w[1].sup / w[0].sup) / libm::log(distance(w[1].beta) / distance(w[0].beta)))
        .collect();
    let expected_exponent = match regime {
        BoundRegime::Negative => e,
        BoundRegime::BelowThreshold => -1.0,
    };
    Ok(IntegralBoundReport {
        alpha,
        regime,
        threshold,
        t_max,
        rows: rows.clone(),
        constants_by_level,
        refinement_change,
        exponents,
        expected_exponent,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{Functional, Sample};
    use proptest::prelude::*;

    #[test]
    fn exact_line_is_recovered() {
        let pts: Vec<FitPoint> = (0..6).map(|i| FitPoint::new(i as f64, 2.0 - 0.5 * i as f64)).collect();
        let f = fit_line(&pts).unwrap();
        assert!((f.slope + 0.5).abs() < 1e-14);
        assert!((f.intercept - 2.0).abs() < 1e-14);
        assert!(f.slope_se < 1e-12);
        assert!(fit_line(&pts[..2]).is_err());
    }

    #[test]
    fn deterministic_decay_rate() {
        let nu = 0.5;
        let series: Vec<MomentEstimate> = (0..=10)
            .map(|k| {
                let t = 0.1 * k as f64;
                let mut e = MomentEstimate::new(Functional::Pointwise { x: 0.5, p: 2.0 }, t).unwrap();
                let v = libm::exp(-2.0 * nu * PI * PI * t);
                e.push(Sample::from_value(v));
                e.push(Sample::from_value(v));
                e
            })
            .collect();
        let fit = lyapunov_exponent(&series, (0.0, 1.0), Z_95).unwrap();
        assert!((fit.slope / (-2.0 * nu * PI * PI) - 1.0).abs() < 1e-10);
        assert!(fit.significantly_negative());
    }

    #[test]
    fn non_finite_points_are_dropped() {
        let mut pts: Vec<FitPoint> = (0..5).map(|i| FitPoint::new(i as f64, i as f64)).collect();
        pts.push(FitPoint::new(2.5, f64::NEG_INFINITY));
        let f = fit_rate(Abscissa::Time, &pts, (0.0, 4.0), Z_95).unwrap();
        assert_eq!(f.dropped, vec![2.5]);
        assert!((f.slope - 1.0).abs() < 1e-14);
    }

    #[test]
    fn excitation_of_exact_quartic() {
        let pts: Vec<EnergyPoint> = [8.0, 16.0, 32.0, 64.0]
            .iter()
            .map(|&l: &f64| EnergyPoint { lambda: l, log_energy: 0.01 * libm::pow(l, 4.0), log_energy_sd: None })
            .collect();
        let fit = excitation_index(&pts, Z_95).unwrap();
        assert!((fit.index.slope - 4.0).abs() < 1e-6);
        assert!(fit.quartic_preferred());
        assert!(fit.flagged.is_empty());
    }

    #[test]
    fn excitation_rejects_bad_grids_and_flags_small_energy() {
        let mk = |l: f64, e: f64| EnergyPoint { lambda: l, log_energy: e, log_energy_sd: None };
        assert!(excitation_index(&[mk(1.0, 1.0), mk(2.0, 2.0), mk(3.0, 3.0), mk(4.0, 4.0)], Z_95).is_err());
        assert!(excitation_index(&[mk(1.0, 1.0), mk(2.0, 2.0), mk(4.0, 3.0)], Z_95).is_err());
        let pts = [mk(1.0, -0.5), mk(2.0, 2.0), mk(4.0, 30.0), mk(8.0, 500.0), mk(16.0, 8000.0)];
        let fit = excitation_index(&pts, Z_95).unwrap();
        assert_eq!(fit.flagged, vec![1.0]);
    }

    fn rate(slope: f64, se: f64) -> RateFit {
        let pts: Vec<FitPoint> = (0..4).map(|i| FitPoint::new(i as f64, slope * i as f64)).collect();
        let mut f = fit_rate(Abscissa::Time, &pts, (0.0, 3.0), Z_95).unwrap();
        f.slope_ci = Z_95 * se;
        f
    }

    #[test]
    fn thresholds_bracket_the_sign_change() {
        let fits = vec![(0.5, rate(-3.0, 0.1)), (1.0, rate(-1.0, 0.1)), (2.0, rate(0.05, 0.1)), (4.0, rate(2.0, 0.1))];
        let th = threshold_scan(&fits);
        assert_eq!(th.lambda_lower, Some(1.0));
        assert_eq!(th.lambda_upper, Some(4.0));
        assert!(th.ordered() && th.two_sided());
        let one_sided = threshold_scan(&fits[..2]);
        assert_eq!(one_sided.lambda_upper, None);
        assert!(one_sided.ordered());
    }

    #[test]
    fn short_time_integral_matches_free_kernel() {
        // for small t at x = ½ the boundary is invisible and the integral
        // reduces to a Gaussian power integral
        let k = KernelSpec::dirichlet(0.5).unwrap();
        let (alpha, t) = (0.5, 1e-3);
        let got = integral_functional(&k, alpha, 0.0, t, 0.5, IntegralResolution::default()).unwrap();
        let e = (1.0 - alpha) / 2.0;
        let want = libm::pow(4.0 * PI * 0.5, -e) / libm::sqrt(2.0 - alpha) * libm::pow(t, e) / e;
        assert!((got / want - 1.0).abs() < 1e-8, "{got} {want}");
    }

    #[test]
    fn integral_bound_regimes() {
        let k = KernelSpec::dirichlet(0.5).unwrap();
        let r = verify_integral_bounds(&k, 0.5, &[-4.0, -1.0], 5.0, 2, IntegralResolution::default(), 2).unwrap();
        assert_eq!(r.regime, BoundRegime::Negative);
        assert!(r.all_finite());
        assert!(r.refinement_change < 1e-6);
        assert!(verify_integral_bounds(&k, 0.5, &[-1.0, 1.0], 5.0, 2, IntegralResolution::default(), 1).is_err());
        assert!(verify_integral_bounds(&k, 0.5, &[1.0, 8.0], 5.0, 2, IntegralResolution::default(), 1).is_err());
    }

    proptest! {
        #[test]
        fn synthetic_exponentials_recover_slope(slope in -20.0f64..20.0, c in -5.0f64..5.0) {
            let pts: Vec<FitPoint> = (0..8).map(|i| {
                let t = 0.25 * i as f64;
                FitPoint::new(t, c + slope * t)
            }).collect();
            let f = fit_rate(Abscissa::Time, &pts, (0.0, 2.0), Z_95).unwrap();
            prop_assert!((f.slope - slope).abs() < 1e-6);
        }
    }
}
