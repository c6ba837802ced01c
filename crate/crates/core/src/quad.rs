//! Gauss–Legendre rules and the composite integrators built on them.

use alloc::vec::Vec;
use core::f64::consts::PI;

/// Nodes and weights of an n-point Gauss–Legendre rule on [-1, 1].
#[derive(Debug, Clone)]
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    /// Newton iteration on P_n from the Chebyshev-like initial guesses.
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "Gauss-Legendre rule needs at least one node");
        let mut nodes = alloc::vec![0.0; n];
        let mut weights = alloc::vec![0.0; n];
        let m = n.div_ceil(2);
        for i in 0..m {
            let mut z = libm::cos(PI * (i as f64 + 0.75) / (n as f64 + 0.5));
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre_with_derivative(n, z);
                dp = d;
                let dz = p / d;
                z -= dz;
                if dz.abs() < 1e-16 {
                    break;
                }
            }
            let (_, d) = legendre_with_derivative(n, z);
            if d != 0.0 {
                dp = d;
            }
            let w = 2.0 / ((1.0 - z * z) * dp * dp);
            nodes[i] = -z;
            nodes[n - 1 - i] = z;
            weights[i] = w;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Nodes and weights mapped to [a, b].
    pub fn mapped(&self, a: f64, b: f64) -> impl Iterator<Item = (f64, f64)> + '_ {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(move |(&x, &w)| (mid + half * x, half * w))
    }

    /// ∫_a^b f with this rule applied once.
    pub fn integrate<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, mut f: F) -> f64 {
        self.mapped(a, b).map(|(x, w)| w * f(x)).sum()
    }

    /// ∫_a^b f with `panels` equal sub-intervals.
    pub fn composite<F: FnMut(f64) -> f64>(&self, a: f64, b: f64, panels: usize, mut f: F) -> f64 {
        let h = (b - a) / panels as f64;
        (0..panels)
            .map(|k| {
                let lo = a + k as f64 * h;
                self.integrate(lo, lo + h, &mut f)
            })
            .sum()
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}

/// Outcome of a refinement-controlled quadrature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Refined {
    pub value: f64,
    /// |I(2P) - I(P)| at the final halving.
    pub error_estimate: f64,
    pub panels: usize,
    pub converged: bool,
}

/// Composite Gauss–Legendre with panel doubling until two successive
/// values differ by less than `tol` (absolute) or `max_panels` is hit.
pub fn composite_refined<F: FnMut(f64) -> f64>(
    rule: &GaussLegendre,
    a: f64,
    b: f64,
    start_panels: usize,
    max_panels: usize,
    tol: f64,
    mut f: F,
) -> Refined {
    let mut panels = start_panels.max(1);
    let mut prev = rule.composite(a, b, panels, &mut f);
    loop {
        let next_panels = panels * 2;
        let next = rule.composite(a, b, next_panels, &mut f);
        let err = (next - prev).abs();
        if err <= tol || next_panels >= max_panels {
            return Refined {
                value: next,
                error_estimate: err,
                panels: next_panels,
                converged: err <= tol,
            };
        }
        panels = next_panels;
        prev = next;
    }
}

/// ∫_0^b f for integrands with an integrable singularity at 0, using
/// panels [b·2^{-k-1}, b·2^{-k}] until the panel contributions fall below
/// `rel_tol` of the running total; the remainder is estimated from the
/// geometric decay of the last two panels. `converged` is false when the
/// panel contributions stop shrinking.
pub fn graded_toward_zero<F: FnMut(f64) -> f64>(
    rule: &GaussLegendre,
    b: f64,
    rel_tol: f64,
    max_levels: usize,
    mut f: F,
) -> Refined {
    let mut total = 0.0;
    let mut hi = b;
    let mut last = f64::NAN;
    let mut ratio = f64::NAN;
    for level in 0..max_levels {
        let lo = 0.5 * hi;
        let piece = rule.integrate(lo, hi, &mut f);
        total += piece;
        if level > 0 && last != 0.0 {
            ratio = piece / last;
        }
        last = piece;
        hi = lo;
        if level >= 4 && piece.abs() <= rel_tol * total.abs() && ratio.abs() < 1.0 {
            let tail = piece * ratio / (1.0 - ratio);
            return Refined {
                value: total + tail,
                error_estimate: tail.abs(),
                panels: level + 1,
                converged: true,
            };
        }
        if piece == 0.0 && level >= 4 {
            return Refined { value: total, error_estimate: 0.0, panels: level + 1, converged: true };
        }
    }
    Refined {
        value: total,
        error_estimate: last.abs(),
        panels: max_levels,
        converged: ratio.abs() < 1.0 && last.abs() <= libm::sqrt(rel_tol) * total.abs(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_polynomials_up_to_degree_2n_minus_1() {
        let rule = GaussLegendre::new(5);
        let v = rule.integrate(0.0, 2.0, |x| x.powi(9));
        assert!((v - 2f64.powi(10) / 10.0).abs() < 1e-10);
        let w: f64 = rule.weights.iter().sum();
        assert!((w - 2.0).abs() < 1e-14);
    }

    #[test]
    fn large_rule_is_accurate() {
        let rule = GaussLegendre::new(40);
        let v = rule.integrate(0.0, PI, libm::sin);
        assert!((v - 2.0).abs() < 1e-14);
    }

    #[test]
    fn graded_rule_handles_power_singularity() {
        let rule = GaussLegendre::new(12);
        let r = graded_toward_zero(&rule, 1.0, 1e-15, 200, |x| x.powf(-0.75));
        assert!(r.converged);
        assert!((r.value - 4.0).abs() < 1e-10, "{}", r.value);
    }

    #[test]
    fn graded_rule_flags_divergence() {
        let rule = GaussLegendre::new(8);
        let r = graded_toward_zero(&rule, 1.0, 1e-12, 60, |x| 1.0 / (x * x));
        assert!(!r.converged);
    }
}
