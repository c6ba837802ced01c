//! Garsia–Rodemich–Rumsey functional of sampled profiles and the Hölder
//! modulus it implies.
//!
//! Samples f_i = f(i·h), h = 1/(n−1), are read as the piecewise-linear
//! interpolant F. Writing the double integral as
//! B = 2∫₀¹ r^{−γ} D(r) dr with D(r) = ∫₀^{1−r} |F(x+r) − F(x)|^p dx and
//! γ = 2 + δ − ε, D is integrated exactly on the linear pieces of the
//! increment. The diagonal |x − y| < c is excluded; for c ≤ h one has
//! D(r) = A r^p + C r^{p+1} exactly, so two halvings of the cutoff remove
//! its effect by Richardson extrapolation.

use alloc::vec::Vec;

use crate::error::{domain, Error, Result};
use crate::kernel::Boundary;
use crate::quad::GaussLegendre;
use crate::solver::ScaledField;

/// Exponents of the GRR functional and the Hölder bound.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GrrParams {
    p: f64,
    delta: f64,
    epsilon: f64,
}

impl GrrParams {
    pub fn new(p: f64, delta: f64, epsilon: f64) -> Result<Self> {
        if !(p >= 1.0 && p.is_finite()) {
            return Err(domain!("p must be at least 1, got {p}"));
        }
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(domain!("δ must be positive, got {delta}"));
        }
        if !(epsilon > 0.0 && epsilon < delta.min(1.0)) {
            return Err(domain!("ε must lie in (0, min(δ, 1)), got {epsilon}"));
        }
        Ok(Self { p, delta, epsilon })
    }

    /// (p, δ, ε) = (8, 1, ¼).
    pub fn standard() -> Self {
        Self { p: 8.0, delta: 1.0, epsilon: 0.25 }
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// γ = 2 + δ − ε, the singular exponent of the functional.
    pub fn gamma(&self) -> f64 {
        2.0 + self.delta - self.epsilon
    }

    /// (δ − ε)/p.
    pub fn holder_exponent(&self) -> f64 {
        (self.delta - self.epsilon) / self.p
    }

    /// κ = 8(1 + 2/(δ − ε)): the value of 8∫₀^h Φ⁻¹(B/u²)dφ(u)/(B^{1/p}h^{(δ−ε)/p})
    /// for Φ = |·|^p and φ(u) = u^{γ/p}.
    pub fn kappa(&self) -> f64 {
        8.0 * (1.0 + 2.0 / (self.delta - self.epsilon))
    }

    /// 8(1 + 1/(δ − ε)), the commonly printed variant of the constant;
    /// reported for comparison only.
    pub fn kappa_as_printed(&self) -> f64 {
        8.0 * (1.0 + 1.0 / (self.delta - self.epsilon))
    }

    /// κB^{1/p}r^{(δ−ε)/p}.
    pub fn holder_bound(&self, b: f64, r: f64) -> f64 {
        self.kappa() * libm::pow(b, 1.0 / self.p) * libm::pow(r, self.holder_exponent())
    }

    /// Exponent a = p + 1 − γ of the excluded diagonal strip, c^a.
    fn strip_exponent(&self) -> f64 {
        self.p + 1.0 - self.gamma()
    }
}

/// Samples on the uniform grid x_i = i/(n−1), endpoints included.
#[derive(Debug, Clone, PartialEq)]
pub struct Profile {
    values: Vec<f64>,
}

impl Profile {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(domain!("a profile needs at least 2 samples"));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(domain!("non-finite sample at index {i}"));
        }
        Ok(Self { values })
    }

    /// Physical values of a solver snapshot with the boundary values
    /// restored: zeros for Dirichlet, mirrored neighbours for Neumann.
    pub fn from_snapshot(field: &ScaledField, boundary: Boundary) -> Result<Self> {
        let inner = field.to_physical();
        let Some((&first, &last)) = inner.first().zip(inner.last()) else {
            return Err(domain!("empty snapshot"));
        };
        let (a, b) = match boundary {
            Boundary::Dirichlet => (0.0, 0.0),
            Boundary::Neumann => (first, last),
            Boundary::Free => return Err(Error::Unsupported("profiles live on [0, 1]".into())),
        };
        let mut values = Vec::with_capacity(inner.len() + 2);
        values.push(a);
        values.extend_from_slice(&inner);
        values.push(b);
        Self::new(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn spacing(&self) -> f64 {
        1.0 / (self.values.len() - 1) as f64
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.values.iter().map(|v| c * v).collect())
    }

    fn at(&self, x: f64) -> f64 {
        let n = self.values.len() - 1;
        let s = (x * n as f64).clamp(0.0, n as f64);
        let i = (libm::floor(s) as usize).min(n - 1);
        let w = s - i as f64;
        self.values[i] + w * (self.values[i + 1] - self.values[i])
    }

    /// D(r) = ∫₀^{1−r} |F(x+r) − F(x)|^p dx, exact on each interval where
    /// the increment is linear.
    fn increment_power(&self, r: f64, p: f64) -> f64 {
        if r >= 1.0 {
            return 0.0;
        }
        let n = self.values.len() - 1;
        let h = self.spacing();
        let end = 1.0 - r;
        // breakpoints: grid nodes and grid nodes shifted left by r, merged
        let nodes = (0..=n).map(|i| i as f64 * h).take_while(|&x| x < end);
        let mut shifted = (0..=n).map(|i| i as f64 * h - r).filter(|&y| y > 0.0 && y < end).peekable();
        let mut cuts: Vec<f64> = Vec::with_capacity(2 * n + 2);
        for x in nodes {
            while let Some(&y) = shifted.peek() {
                if y >= x {
                    break;
                }
                cuts.push(y);
                shifted.next();
            }
            cuts.push(x);
        }
        cuts.extend(shifted);
        cuts.push(end);
        let mut total = 0.0;
        for w in cuts.windows(2) {
            let (a, b) = (w[0], w[1]);
            if b - a <= 0.0 {
                continue;
            }
            let ga = self.at(a + r) - self.at(a);
            let gb = self.at(b + r) - self.at(b);
            total += linear_power_integral(a, b, ga, gb, p);
        }
        total
    }
}

/// ∫_a^b |g|^p for g linear from ga to gb.
fn linear_power_integral(a: f64, b: f64, ga: f64, gb: f64, p: f64) -> f64 {
    let len = b - a;
    if ga * gb < 0.0 {
        let root = a + len * ga / (ga - gb);
        return linear_power_integral(a, root, ga, 0.0, p) + linear_power_integral(root, b, 0.0, gb, p);
    }
    let (lo, hi) = (ga.abs().min(gb.abs()), ga.abs().max(gb.abs()));
    if hi == 0.0 {
        return 0.0;
    }
    if hi - lo <= 1e-6 * hi {
        // nearly constant: two-point Gauss on the linear function
        let m = 0.5 * (lo + hi);
        let d = 0.5 * (hi - lo) / libm::sqrt(3.0);
        return 0.5 * len * (libm::pow(m - d, p) + libm::pow(m + d, p));
    }
    len * (libm::pow(hi, p + 1.0) - libm::pow(lo, p + 1.0)) / ((p + 1.0) * (hi - lo))
}

/// B with the diagonal excluded below `cutoff` (cutoff ≤ h).
fn truncated_functional(f: &Profile, params: &GrrParams, cutoff: f64, rule: &GaussLegendre) -> f64 {
    let h = f.spacing();
    let n = f.values.len() - 1;
    let p = params.p;
    let gamma = params.gamma();
    let mut total = 0.0;
    let mut cell = |a: f64, b: f64| {
        for (r, w) in rule.mapped(a, b) {
            total += w * libm::pow(r, -gamma) * f.increment_power(r, p);
        }
    };
    // geometric panels from the cutoff up to h, then one panel per cell
    let mut a = cutoff;
    while a < h * (1.0 - 1e-12) {
        let b = (2.0 * a).min(h);
        cell(a, b);
        a = b;
    }
    for k in 1..n {
        cell(k as f64 * h, (k + 1) as f64 * h);
    }
    2.0 * total
}

/// Result of [`grr_functional`].
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GrrValue {
    /// Diagonal cutoff: one grid cell.
    pub cutoff: f64,
    /// B with |x − y| < cutoff excluded.
    pub at_cutoff: f64,
    /// B with |x − y| < cutoff/2 excluded.
    pub at_half_cutoff: f64,
    /// Cutoff-extrapolated value.
    pub extrapolated: f64,
    /// |at_half_cutoff − at_cutoff| / at_half_cutoff (0 when both vanish).
    pub sensitivity: f64,
    /// The excluded strip does not vanish as the cutoff shrinks: the
    /// interpolant is too rough for these (p, δ, ε).
    pub divergent: bool,
}

impl GrrValue {
    /// The extrapolated value enlarged by the cutoff sensitivity; the B
    /// used by Hölder checks.
    pub fn with_slack(&self) -> f64 {
        self.extrapolated * (1.0 + self.sensitivity)
    }
}

/// Double-quadrature value of B = ∫∫|f(x) − f(y)|^p/|x − y|^{2+δ−ε} for the
/// interpolant of the samples; needs at least 64 of them.
pub fn grr_functional(f: &Profile, params: &GrrParams) -> Result<GrrValue> {
    if f.values.len() < 64 {
        return Err(domain!("need at least 64 samples, got {}", f.values.len()));
    }
    let rule = GaussLegendre::new(8);
    let h = f.spacing();
    let b1 = truncated_functional(f, params, h, &rule);
    let b2 = truncated_functional(f, params, 0.5 * h, &rule);
    let b4 = truncated_functional(f, params, 0.25 * h, &rule);
    let a = params.strip_exponent();
    let divergent = !(a > 0.0) && b2 > 0.0;
    let extrapolated = if divergent {
        f64::INFINITY
    } else {
        // the strip contributes α c^a + β c^{a+1}; eliminate both terms
        let ra = libm::pow(2.0, a);
        let r1 = (ra * b2 - b1) / (ra - 1.0);
        let r2 = (ra * b4 - b2) / (ra - 1.0);
        let rb = 2.0 * ra;
        (rb * r2 - r1) / (rb - 1.0)
    };
    let sensitivity = if b2 > 0.0 { ((b2 - b1) / b2).abs() } else { 0.0 };
    Ok(GrrValue { cutoff: h, at_cutoff: b1, at_half_cutoff: b2, extrapolated, sensitivity, divergent })
}

/// Largest |f_i − f_j| / (κB^{1/p}|x_i − x_j|^{(δ−ε)/p}) over node pairs.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct HolderReport {
    pub max_ratio: f64,
    pub violations: usize,
    pub pairs: usize,
}

pub fn holder_bound_check(f: &Profile, params: &GrrParams, b: f64) -> Result<HolderReport> {
    if !(b >= 0.0) {
        return Err(domain!("B must be nonnegative, got {b}"));
    }
    let h = f.spacing();
    let scale = params.kappa() * libm::pow(b, 1.0 / params.p);
    let e = params.holder_exponent();
    let vals = &f.values;
    let mut max_ratio: f64 = 0.0;
    let mut violations = 0;
    let mut pairs = 0;
    for i in 0..vals.len() {
        for j in i + 1..vals.len() {
            pairs += 1;
            let diff = (vals[i] - vals[j]).abs();
            if diff == 0.0 {
                continue;
            }
            let bound = scale * libm::pow((j - i) as f64 * h, e);
            let ratio = diff / bound;
            max_ratio = max_ratio.max(ratio);
            if ratio > 1.0 {
                violations += 1;
            }
        }
    }
    Ok(HolderReport { max_ratio, violations, pairs })
}

/// A Young function Φ: convex, even, Φ(0) = 0, with an inverse on [0, ∞).
pub trait Young {
    fn value(&self, x: f64) -> f64;
    fn inverse(&self, y: f64) -> f64;
}

/// An increasing modulus φ with φ(0) = 0 and its derivative.
pub trait Modulus {
    fn value(&self, u: f64) -> f64;
    fn derivative(&self, u: f64) -> f64;
}

/// Φ(x) = |x|^p.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerYoung(pub f64);

impl Young for PowerYoung {
    fn value(&self, x: f64) -> f64 {
        libm::pow(x.abs(), self.0)
    }

    fn inverse(&self, y: f64) -> f64 {
        libm::pow(y, 1.0 / self.0)
    }
}

/// φ(u) = u^q.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerModulus(pub f64);

impl Modulus for PowerModulus {
    fn value(&self, u: f64) -> f64 {
        libm::pow(u, self.0)
    }

    fn derivative(&self, u: f64) -> f64 {
        self.0 * libm::pow(u, self.0 - 1.0)
    }
}

/// The (Φ, φ) pair behind the Hölder bound: |x|^p and u^{(2+δ−ε)/p}.
pub fn power_law_pair(params: &GrrParams) -> (PowerYoung, PowerModulus) {
    (PowerYoung(params.p), PowerModulus(params.gamma() / params.p))
}

/// Value of the general modulus bound and its quadrature diagnostics.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct GrrBound {
    pub value: f64,
    pub error_estimate: f64,
    /// The panel contributions toward u = 0 stopped shrinking.
    pub divergent: bool,
}

/// 8∫₀^{|x−y|} Φ⁻¹(B/u²) dφ(u), written as ∫Φ⁻¹(B/u²)φ'(u)du on panels
/// halving toward 0. The remainder below the last panel is summed as a
/// geometric series once successive panel ratios agree, which is exact for
/// integrands that behave like a power of u near 0.
pub fn grr_general<Y: Young, M: Modulus>(big_phi: &Y, phi: &M, b: f64, x: f64, y: f64) -> Result<GrrBound> {
    if !(b >= 0.0 && b.is_finite()) {
        return Err(domain!("B must be finite and nonnegative, got {b}"));
    }
    let h = (x - y).abs();
    if h == 0.0 || b == 0.0 {
        return Ok(GrrBound { value: 0.0, error_estimate: 0.0, divergent: false });
    }
    let rule = GaussLegendre::new(20);
    let f = |u: f64| big_phi.inverse(b / (u * u)) * phi.derivative(u);
    let mut total = 0.0;
    let mut hi = h;
    let mut last = f64::NAN;
    let mut last_ratio = f64::NAN;
    for level in 0..400 {
        let lo = 0.5 * hi;
        let piece = rule.integrate(lo, hi, f);
        if !piece.is_finite() {
            return Ok(GrrBound { value: f64::INFINITY, error_estimate: f64::INFINITY, divergent: true });
        }
        total += piece;
        hi = lo;
        if level > 0 && last != 0.0 {
            let ratio = piece / last;
            if ratio >= 1.0 && level > 8 {
                return Ok(GrrBound { value: f64::INFINITY, error_estimate: f64::INFINITY, divergent: true });
            }
            if ratio < 1.0 && (ratio - last_ratio).abs() <= 1e-13 * ratio.abs().max(1e-300) {
                let tail = piece * ratio / (1.0 - ratio);
                let err = (tail * (ratio - last_ratio) / (1.0 - ratio)).abs();
                return Ok(GrrBound { value: 8.0 * (total + tail), error_estimate: 8.0 * err, divergent: false });
            }
            if piece.abs() <= 1e-16 * total.abs() {
                return Ok(GrrBound { value: 8.0 * total, error_estimate: 8.0 * piece.abs(), divergent: false });
            }
            last_ratio = ratio;
        }
        last = piece;
    }
    Err(Error::Divergent("modulus integral did not settle within 400 halvings".into()))
}
