//! Gaussian helpers on top of `libm`.

use core::f64::consts::{FRAC_1_SQRT_2, PI};

pub fn normal_pdf(z: f64) -> f64 {
    libm::exp(-0.5 * z * z) / libm::sqrt(2.0 * PI)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * libm::erfc(-z * FRAC_1_SQRT_2)
}

/// Φ(b) − Φ(a) for a ≤ b, computed from the tail that avoids cancellation.
pub fn normal_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        0.5 * (libm::erfc(a * FRAC_1_SQRT_2) - libm::erfc(b * FRAC_1_SQRT_2))
    } else if b <= 0.0 {
        0.5 * (libm::erfc(-b * FRAC_1_SQRT_2) - libm::erfc(-a * FRAC_1_SQRT_2))
    } else {
        1.0 - 0.5 * libm::erfc(-a * FRAC_1_SQRT_2) - 0.5 * libm::erfc(b * FRAC_1_SQRT_2)
    }
}

/// ∫ φ(y) N(y; mean, sd²) dy for the hat function φ with apex at `node`
/// and support [left, right] (left == node or right == node for half hats).
pub fn gaussian_hat_expectation(left: f64, node: f64, right: f64, mean: f64, sd: f64) -> f64 {
    if sd == 0.0 {
        return hat_value(left, node, right, mean);
    }
    let mut total = 0.0;
    if node > left {
        // rising piece (y - left)/(node - left)
        let a = (left - mean) / sd;
        let b = (node - mean) / sd;
        if a < 40.0 && b > -40.0 {
            let mass = normal_mass(a, b);
            total += ((mean - left) * mass + sd * (normal_pdf(a) - normal_pdf(b))) / (node - left);
        }
    }
    if right > node {
        // falling piece (right - y)/(right - node)
        let a = (node - mean) / sd;
        let b = (right - mean) / sd;
        if a < 40.0 && b > -40.0 {
            let mass = normal_mass(a, b);
            total += ((right - mean) * mass - sd * (normal_pdf(a) - normal_pdf(b))) / (right - node);
        }
    }
    total.max(0.0)
}

fn hat_value(left: f64, node: f64, right: f64, y: f64) -> f64 {
    if y < left || y > right {
        0.0
    } else if y <= node {
        if node > left { (y - left) / (node - left) } else { 1.0 }
    } else if right > node {
        (right - y) / (right - node)
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::GaussLegendre;

    #[test]
    fn hat_expectation_matches_quadrature() {
        let rule = GaussLegendre::new(60);
        for &(mean, sd) in &[(0.5, 0.01), (0.52, 0.03), (0.45, 0.2), (0.9, 0.05), (0.5, 1e-5)] {
            let (l, n, r) = (0.48, 0.5, 0.52);
            let exact = gaussian_hat_expectation(l, n, r, mean, sd);
            let pdf = |y: f64| normal_pdf((y - mean) / sd) / sd;
            let q = rule.composite(l, n, 40, |y| (y - l) / (n - l) * pdf(y))
                + rule.composite(n, r, 40, |y| (r - y) / (r - n) * pdf(y));
            assert!((exact - q).abs() < 1e-12, "{mean} {sd}: {exact} vs {q}");
        }
    }

    #[test]
    fn half_hat_at_boundary() {
        let v = gaussian_hat_expectation(0.0, 0.0, 0.1, 0.0, 1e-4);
        assert!((v - 0.5).abs() < 1e-3);
    }

    #[test]
    fn mass_is_stable_in_tails() {
        let m = normal_mass(10.0, 11.0);
        assert!(m > 0.0 && m < 1e-22);
        assert!((normal_mass(-1.0, 1.0) - 0.682_689_492_137_086).abs() < 1e-14);
        assert!((normal_cdf(0.0) - 0.5).abs() < 1e-16);
    }
}
