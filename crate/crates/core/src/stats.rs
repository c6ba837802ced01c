//! Streaming ensemble statistics of path functionals.
//!
//! Every estimate keeps two mergeable summaries side by side: a Welford
//! mean/M2 pair on the raw values and shifted power sums Σe^{l−s}, Σe^{2(l−s)}
//! on their logarithms. The first is used while values stay moderate; once
//! any sample exceeds [`LOG_DOMAIN_THRESHOLD`] the estimate is flagged and
//! reported from the log-domain sums, which cannot overflow.

use alloc::vec::Vec;

use crate::analysis::Z_95;
use crate::error::{domain, Error, Result};
use crate::noise::GridSpec;
use crate::solver::{ScaledField, SolutionPath};

/// ln(1e100); samples above this switch an estimate to log-domain reporting.
pub const LOG_DOMAIN_THRESHOLD: f64 = 230.258_509_299_404_6;

/// Path functional whose ensemble mean is estimated.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields))]
pub enum Functional {
    /// |u(t, x*)|^p at the node nearest x.
    Pointwise { x: f64, p: f64 },
    /// (max_j |u(t, x_j)|)^p.
    SupNorm { p: f64 },
    /// dx·Σ_j |u(t, x_j)|^p.
    LpNorm { p: f64 },
}

/// One functional value, kept both directly and as a logarithm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sample {
    /// The value itself; +∞ when it would overflow.
    pub value: f64,
    /// ln value; −∞ for a zero value.
    pub log_value: f64,
}

impl Sample {
    pub fn from_value(value: f64) -> Self {
        Self { value, log_value: libm::log(value) }
    }
}

impl Functional {
    pub fn p(&self) -> f64 {
        match *self {
            Functional::Pointwise { p, .. } | Functional::SupNorm { p } | Functional::LpNorm { p } => p,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = self.p();
        if !(p >= 2.0 && p.is_finite()) {
            return Err(domain!("moment order must lie in [2, ∞), got {p}"));
        }
        if let Functional::Pointwise { x, .. } = *self {
            if !(0.0..=1.0).contains(&x) {
                return Err(domain!("probe position {x} outside [0, 1]"));
            }
        }
        Ok(())
    }

    /// Short stable label, e.g. `pointwise(0.5)`, `sup`, `lp`.
    pub fn label(&self) -> alloc::string::String {
        match *self {
            Functional::Pointwise { x, .. } => alloc::format!("pointwise({x})"),
            Functional::SupNorm { .. } => "sup".into(),
            Functional::LpNorm { .. } => "lp".into(),
        }
    }

    /// Evaluates the functional on one snapshot.
    pub fn evaluate(&self, field: &ScaledField, grid: &GridSpec) -> Result<Sample> {
        let n = grid.n_interior();
        if field.values.len() != n {
            return Err(Error::Mismatch("snapshot length differs from grid".into()));
        }
        let p = self.p();
        let ls = field.log_scale;
        match *self {
            Functional::Pointwise { x, .. } => {
                let v = field.values[nearest_node(x, grid)].abs();
                Ok(power_sample(v, ls, p))
            }
            Functional::SupNorm { .. } => {
                let v = field.values.iter().fold(0.0_f64, |m, u| m.max(u.abs()));
                Ok(power_sample(v, ls, p))
            }
            Functional::LpNorm { .. } => {
                let dx = grid.dx();
                let top = field.values.iter().fold(0.0_f64, |m, u| m.max(u.abs()));
                if top == 0.0 {
                    return Ok(Sample { value: 0.0, log_value: f64::NEG_INFINITY });
                }
                let rel: f64 = field.values.iter().map(|u| libm::pow(u.abs() / top, p)).sum();
                let log_value = libm::log(dx * rel) + p * (libm::log(top) + ls);
                let value = if ls == 0.0 {
                    dx * field.values.iter().map(|u| libm::pow(u.abs(), p)).sum::<f64>()
                } else if log_value < LOG_DOMAIN_THRESHOLD {
                    libm::exp(log_value)
                } else {
                    f64::INFINITY
                };
                Ok(Sample { value, log_value })
            }
        }
    }
}

/// Index of the interior node nearest x, clamped to the interior.
pub fn nearest_node(x: f64, grid: &GridSpec) -> usize {
    let k = libm::round(x / grid.dx()) as isize - 1;
    k.clamp(0, grid.n_interior() as isize - 1) as usize
}

fn power_sample(v: f64, log_scale: f64, p: f64) -> Sample {
    if v == 0.0 {
        return Sample { value: 0.0, log_value: f64::NEG_INFINITY };
    }
    let log_value = p * (libm::log(v) + log_scale);
    let value = if log_scale == 0.0 {
        libm::pow(v, p)
    } else if log_value < LOG_DOMAIN_THRESHOLD {
        libm::exp(log_value)
    } else {
        f64::INFINITY
    };
    Sample { value, log_value }
}

/// Streaming estimate of E[F] for one functional at one time.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MomentEstimate {
    functional: Functional,
    t: f64,
    n: u64,
    mean: f64,
    m2: f64,
    log_shift: f64,
    s1: f64,
    s2: f64,
    log_domain: bool,
}

impl MomentEstimate {
    pub fn new(functional: Functional, t: f64) -> Result<Self> {
        functional.validate()?;
        if !(t >= 0.0 && t.is_finite()) {
            return Err(domain!("observation time must be nonnegative, got {t}"));
        }
        Ok(Self {
            functional,
            t,
            n: 0,
            mean: 0.0,
            m2: 0.0,
            log_shift: f64::NEG_INFINITY,
            s1: 0.0,
            s2: 0.0,
            log_domain: false,
        })
    }

    pub fn functional(&self) -> Functional {
        self.functional
    }

    pub fn t(&self) -> f64 {
        self.t
    }

    pub fn n(&self) -> u64 {
        self.n
    }

    /// True once some sample exceeded the log-domain threshold.
    pub fn log_domain(&self) -> bool {
        self.log_domain
    }

    /// Adds one functional value.
    pub fn push(&mut self, sample: Sample) {
        self.n += 1;
        if !(sample.log_value < LOG_DOMAIN_THRESHOLD) || !sample.value.is_finite() {
            self.log_domain = true;
        }
        if !self.log_domain {
            let d = sample.value - self.mean;
            self.mean += d / self.n as f64;
            self.m2 += d * (sample.value - self.mean);
        }
        let l = sample.log_value;
        if l == f64::NEG_INFINITY {
            return;
        }
        if l > self.log_shift {
            let r = libm::exp(self.log_shift - l);
            self.s1 *= r;
            self.s2 *= r * r;
            self.log_shift = l;
        }
        let e = libm::exp(l - self.log_shift);
        self.s1 += e;
        self.s2 += e * e;
    }

    /// Evaluates the functional on the snapshot of `path` at this estimate's
    /// time (matched within half a time step) and adds it.
    pub fn accumulate(&mut self, path: &SolutionPath) -> Result<()> {
        let k = snapshot_index(path, self.t)?;
        let s = self.functional.evaluate(&path.snapshots[k], &path.grid)?;
        self.push(s);
        Ok(())
    }

    /// Chan-style pairwise combination.
    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.functional != other.functional || self.t != other.t {
            return Err(Error::Mismatch("merging estimates of different functionals or times".into()));
        }
        if other.n == 0 {
            return Ok(*self);
        }
        if self.n == 0 {
            return Ok(*other);
        }
        let n = self.n + other.n;
        let (na, nb) = (self.n as f64, other.n as f64);
        let d = other.mean - self.mean;
        let mean = self.mean + d * nb / n as f64;
        let m2 = self.m2 + other.m2 + d * d * na * nb / n as f64;
        let shift = self.log_shift.max(other.log_shift);
        let (s1, s2) = if shift == f64::NEG_INFINITY {
            (0.0, 0.0)
        } else {
            let ra = libm::exp(self.log_shift - shift);
            let rb = libm::exp(other.log_shift - shift);
            (self.s1 * ra + other.s1 * rb, self.s2 * ra * ra + other.s2 * rb * rb)
        };
        Ok(Self {
            functional: self.functional,
            t: self.t,
            n,
            mean,
            m2,
            log_shift: shift,
            s1,
            s2,
            log_domain: self.log_domain || other.log_domain,
        })
    }

    pub fn mean(&self) -> f64 {
        if self.log_domain {
            libm::exp(self.log_mean())
        } else {
            self.mean
        }
    }

    /// Unbiased sample variance; NaN for n < 2.
    pub fn variance(&self) -> f64 {
        if self.n < 2 {
            return f64::NAN;
        }
        if self.log_domain {
            libm::exp(2.0 * self.log_shift) * self.shifted_m2() / (self.n - 1) as f64
        } else {
            self.m2 / (self.n - 1) as f64
        }
    }

    /// 1.96·sqrt(variance/n).
    pub fn ci_half_width(&self) -> f64 {
        Z_95 * libm::sqrt(self.variance() / self.n as f64)
    }

    /// ln of the sample mean, from the log-domain sums.
    pub fn log_mean(&self) -> f64 {
        if self.n == 0 {
            return f64::NAN;
        }
        self.log_shift + libm::log(self.s1 / self.n as f64)
    }

    /// 95% half-width for ln(mean), by the delta method: z·sd/(mean·√n).
    pub fn log_ci_half_width(&self) -> f64 {
        if self.n < 2 || self.s1 == 0.0 {
            return f64::NAN;
        }
        let n = self.n as f64;
        let var = self.shifted_m2() / (n - 1.0);
        Z_95 * libm::sqrt(var / n) / (self.s1 / n)
    }

    fn shifted_m2(&self) -> f64 {
        (self.s2 - self.s1 * self.s1 / self.n as f64).max(0.0)
    }

    /// (mean)^{1/p} for an LpNorm estimate, with a delta-method interval.
    pub fn p_energy(&self) -> Result<Energy> {
        let p = match self.functional {
            Functional::LpNorm { p } => p,
            _ => return Err(Error::Mismatch("p-energy needs an LpNorm estimate".into())),
        };
        if self.n < 2 {
            return Err(domain!("p-energy needs at least 2 samples"));
        }
        let log_mean = self.log_mean();
        if !(self.mean() > 0.0) || !log_mean.is_finite() {
            return Err(Error::UndefinedEnergy(self.mean()));
        }
        let log_value = log_mean / p;
        let (value, ci) = if self.log_domain {
            let v = libm::exp(log_value);
            (v, v * self.log_ci_half_width() / p)
        } else {
            let m = self.mean;
            (libm::pow(m, 1.0 / p), self.ci_half_width() * libm::pow(m, 1.0 / p - 1.0) / p)
        };
        Ok(Energy {
            p,
            value,
            ci_half_width: ci,
            log_value,
            log_ci_half_width: self.log_ci_half_width() / p,
            log_domain: self.log_domain,
        })
    }
}

/// p-th energy (E‖u‖_p^p)^{1/p} with its interval on both scales.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Energy {
    pub p: f64,
    pub value: f64,
    pub ci_half_width: f64,
    pub log_value: f64,
    pub log_ci_half_width: f64,
    pub log_domain: bool,
}

fn snapshot_index(path: &SolutionPath, t: f64) -> Result<usize> {
    let half = 0.5 * path.grid.dt();
    path.times
        .iter()
        .position(|&s| (s - t).abs() <= half)
        .ok_or_else(|| domain!("path has no snapshot at t = {t}"))
}

/// One estimate per (functional, time); accumulates whole paths.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct EnsembleMoments {
    pub estimates: Vec<MomentEstimate>,
}

impl EnsembleMoments {
    /// Estimates ordered by functional, then time.
    pub fn new(functionals: &[Functional], times: &[f64]) -> Result<Self> {
        let mut estimates = Vec::with_capacity(functionals.len() * times.len());
        for f in functionals {
            for &t in times {
                estimates.push(MomentEstimate::new(*f, t)?);
            }
        }
        Ok(Self { estimates })
    }

    pub fn accumulate(&mut self, path: &SolutionPath) -> Result<()> {
        for e in &mut self.estimates {
            e.accumulate(path)?;
        }
        Ok(())
    }

    pub fn merge(&self, other: &Self) -> Result<Self> {
        if self.estimates.len() != other.estimates.len() {
            return Err(Error::Mismatch("ensembles track different estimates".into()));
        }
        let estimates = self.estimates.iter().zip(&other.estimates).map(|(a, b)| a.merge(b)).collect::<Result<_>>()?;
        Ok(Self { estimates })
    }

    pub fn find(&self, functional: Functional, t: f64) -> Option<&MomentEstimate> {
        self.estimates.iter().find(|e| e.functional == functional && (e.t - t).abs() <= 1e-12 * t.max(1.0))
    }

    pub fn sample_count(&self) -> u64 {
        self.estimates.first().map_or(0, |e| e.n)
    }
}

/// Samples per block in [`reduce_blocks`]. Fixed so that the reduction tree,
/// and hence every rounding, is independent of how blocks are scheduled.
pub const BLOCK_SIZE: u64 = 64;

/// Left fold of per-block results in block order. Callers compute block b
/// from samples [b·BLOCK_SIZE, (b+1)·BLOCK_SIZE) in any order or thread.
pub fn reduce_blocks(blocks: &[EnsembleMoments]) -> Result<Option<EnsembleMoments>> {
    let mut iter = blocks.iter();
    let Some(first) = iter.next() else { return Ok(None) };
    let mut acc = first.clone();
    for b in iter {
        acc = acc.merge(b)?;
    }
    Ok(Some(acc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::Boundary;
    use crate::solver::Sigma;
    use proptest::prelude::*;

    fn grid(n: usize) -> GridSpec {
        GridSpec::new(n, 1e-3, 1.0).unwrap()
    }

    fn constant_path(c: f64, n: usize) -> SolutionPath {
        SolutionPath {
            grid: grid(n),
            boundary: Boundary::Neumann,
            lambda: 0.0,
            sigma: Sigma::linear(1.0).unwrap(),
            times: vec![0.0, 0.5],
            snapshots: vec![ScaledField::unscaled(vec![c; n]); 2],
        }
    }

    #[test]
    fn constant_field_pointwise_is_exact() {
        let path = constant_path(3.0, 15);
        let mut e = MomentEstimate::new(Functional::Pointwise { x: 0.5, p: 2.0 }, 0.5).unwrap();
        for _ in 0..10 {
            e.accumulate(&path).unwrap();
        }
        assert_eq!(e.mean(), 9.0);
        assert_eq!(e.variance(), 0.0);
    }

    #[test]
    fn lp_norm_of_one() {
        let path = constant_path(1.0, 31);
        let mut e = MomentEstimate::new(Functional::LpNorm { p: 3.0 }, 0.5).unwrap();
        e.accumulate(&path).unwrap();
        assert!((e.mean() - 31.0 / 32.0).abs() < 1e-15);
    }

    #[test]
    fn missing_time_is_rejected() {
        let path = constant_path(1.0, 7);
        let mut e = MomentEstimate::new(Functional::SupNorm { p: 2.0 }, 0.25).unwrap();
        assert!(e.accumulate(&path).is_err());
    }

    #[test]
    fn energy_of_unit_and_square() {
        let mut e = MomentEstimate::new(Functional::LpNorm { p: 5.0 }, 0.0).unwrap();
        e.push(Sample::from_value(1.0));
        e.push(Sample::from_value(1.0));
        assert_eq!(e.p_energy().unwrap().value, 1.0);
        let mut e = MomentEstimate::new(Functional::LpNorm { p: 2.0 }, 0.0).unwrap();
        e.push(Sample::from_value(4.0));
        e.push(Sample::from_value(4.0));
        assert_eq!(e.p_energy().unwrap().value, 2.0);
        assert!(MomentEstimate::new(Functional::SupNorm { p: 2.0 }, 0.0).unwrap().p_energy().is_err());
    }

    #[test]
    fn zero_mean_energy_is_undefined() {
        let mut e = MomentEstimate::new(Functional::LpNorm { p: 2.0 }, 0.0).unwrap();
        e.push(Sample::from_value(0.0));
        e.push(Sample::from_value(0.0));
        assert!(matches!(e.p_energy(), Err(Error::UndefinedEnergy(_))));
    }

    #[test]
    fn log_domain_survives_overflow() {
        let f = Functional::SupNorm { p: 2.0 };
        let mut e = MomentEstimate::new(f, 0.0).unwrap();
        e.push(Sample { value: f64::INFINITY, log_value: 1000.0 });
        e.push(Sample { value: f64::INFINITY, log_value: 1000.0 + core::f64::consts::LN_2 });
        assert!(e.log_domain());
        assert!((e.log_mean() - (1000.0 + libm::log(1.5))).abs() < 1e-12);
        assert!(e.log_ci_half_width().is_finite());
    }

    #[test]
    fn merge_identity_and_mismatch() {
        let f = Functional::SupNorm { p: 2.0 };
        let mut a = MomentEstimate::new(f, 0.0).unwrap();
        a.push(Sample::from_value(2.0));
        a.push(Sample::from_value(5.0));
        let empty = MomentEstimate::new(f, 0.0).unwrap();
        assert_eq!(a.merge(&empty).unwrap(), a);
        assert_eq!(empty.merge(&a).unwrap(), a);
        let other = MomentEstimate::new(Functional::LpNorm { p: 2.0 }, 0.0).unwrap();
        assert!(a.merge(&other).is_err());
    }

    #[test]
    fn scaled_snapshot_matches_physical() {
        let g = grid(5);
        let raw = ScaledField::unscaled(vec![0.5, -2.0, 1.0, 0.25, 0.0]);
        let scaled = ScaledField { values: raw.values.iter().map(|v| v / 8.0).collect(), log_scale: libm::log(8.0) };
        for f in [Functional::Pointwise { x: 0.3, p: 3.0 }, Functional::SupNorm { p: 4.0 }, Functional::LpNorm { p: 2.5 }] {
            let a = f.evaluate(&raw, &g).unwrap();
            let b = f.evaluate(&scaled, &g).unwrap();
            assert!((a.value - b.value).abs() < 1e-12 * a.value);
            assert!((a.log_value - b.log_value).abs() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn merge_is_commutative_and_shard_invariant(xs in prop::collection::vec(0.0f64..100.0, 2..200), cut in 0usize..200) {
            let f = Functional::LpNorm { p: 2.0 };
            let cut = cut.min(xs.len());
            let mut whole = MomentEstimate::new(f, 0.0).unwrap();
            let mut a = whole;
            let mut b = whole;
            for (i, &x) in xs.iter().enumerate() {
                whole.push(Sample::from_value(x));
                if i < cut { a.push(Sample::from_value(x)) } else { b.push(Sample::from_value(x)) }
            }
            let ab = a.merge(&b).unwrap();
            let ba = b.merge(&a).unwrap();
            prop_assert!((ab.mean() - ba.mean()).abs() <= 1e-12 * ab.mean().abs().max(1e-300));
            prop_assert!((ab.mean() - whole.mean()).abs() <= 1e-12 * whole.mean().abs().max(1e-300));
            prop_assert!((ab.variance() - whole.variance()).abs() <= 1e-9 * whole.variance().abs().max(1e-12));
            prop_assert!((ab.log_mean() - whole.log_mean()).abs() <= 1e-12 * whole.log_mean().abs().max(1.0));
        }

        #[test]
        fn pointwise_never_exceeds_sup(vals in prop::collection::vec(-10.0f64..10.0, 9), x in 0.0f64..1.0, p in 2.0f64..8.0) {
            let g = grid(9);
            let field = ScaledField::unscaled(vals);
            let pw = Functional::Pointwise { x, p }.evaluate(&field, &g).unwrap();
            let sup = Functional::SupNorm { p }.evaluate(&field, &g).unwrap();
            let lp = Functional::LpNorm { p }.evaluate(&field, &g).unwrap();
            prop_assert!(pw.value <= sup.value);
            prop_assert!(lp.value <= sup.value * (1.0 + 1e-12));
        }
    }
}
