//! User valuation laws.
//!
//! Every user's private type is drawn independently from a [`TypeDistribution`].
//! Besides density, distribution function and sampling, each law exposes the
//! virtual valuation `c(t) = t - (1 - F(t)) / f(t)` and its generalized inverse
//! `inf { t in support : c(t) >= z }`, which drive allocation and payments.

use std::fmt;
use std::sync::Arc;

use rand::distributions::Open01;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{AuctionError, Result};

/// Quantile at which infinite supports are truncated for deterministic integrals.
pub const TAIL_QUANTILE: f64 = 1.0 - 1e-9;

/// Largest tolerated decrease of `c` between adjacent grid points.
pub const REGULARITY_TOLERANCE: f64 = 1e-9;

const BISECTION_MAX_ITERS: usize = 400;

/// Closed interval `[lower, upper]`; `upper` may be `+inf`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Support {
    pub lower: f64,
    pub upper: f64,
}

impl Support {
    pub fn contains(&self, t: f64) -> bool {
        t >= self.lower && t <= self.upper
    }

    pub fn is_bounded(&self) -> bool {
        self.upper.is_finite()
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn clamp(&self, t: f64) -> f64 {
        t.max(self.lower).min(self.upper)
    }
}

/// A user-supplied continuous law. Implementors must return a density that is
/// strictly positive on the interior of the support.
pub trait ContinuousLaw: Send + Sync + fmt::Debug {
    fn pdf(&self, t: f64) -> f64;
    fn cdf(&self, t: f64) -> f64;
    fn support(&self) -> Support;

    /// Inverse distribution function. The default inverts `cdf` by bisection.
    fn quantile(&self, u: f64) -> f64 {
        let support = self.support();
        let mut lo = support.lower;
        let mut hi = if support.is_bounded() {
            support.upper
        } else {
            let mut hi = lo + 1.0;
            let mut step = 1.0;
            while self.cdf(hi) < u && step < 1e300 {
                step *= 2.0;
                hi = lo + step;
            }
            hi
        };
        for _ in 0..BISECTION_MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.cdf(mid) < u {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    }
}

/// Shared handle to a [`ContinuousLaw`]. Equality is identity of the handle.
#[derive(Clone)]
pub struct CustomLaw {
    name: String,
    law: Arc<dyn ContinuousLaw>,
}

impl CustomLaw {
    pub fn name(&self) -> &str {
        &self.name
    }
}

impl fmt::Debug for CustomLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CustomLaw")
            .field("name", &self.name)
            .field("law", &self.law)
            .finish()
    }
}

impl PartialEq for CustomLaw {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.law, &other.law)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TypeDistribution {
    Uniform { lower: f64, upper: f64 },
    Exponential { rate: f64 },
    Custom(CustomLaw),
}

impl TypeDistribution {
    pub fn uniform(lower: f64, upper: f64) -> Result<Self> {
        if !(lower.is_finite() && upper.is_finite() && lower < upper) {
            return Err(AuctionError::InvalidParameter(format!(
                "uniform requires finite lower < upper, got [{lower}, {upper}]"
            )));
        }
        Ok(TypeDistribution::Uniform { lower, upper })
    }

    pub fn exponential(rate: f64) -> Result<Self> {
        if !(rate.is_finite() && rate > 0.0) {
            return Err(AuctionError::InvalidParameter(format!(
                "exponential rate must be positive and finite, got {rate}"
            )));
        }
        Ok(TypeDistribution::Exponential { rate })
    }

    pub fn custom(name: impl Into<String>, law: Arc<dyn ContinuousLaw>) -> Result<Self> {
        let support = law.support();
        if !(support.lower.is_finite() && support.lower < support.upper) {
            return Err(AuctionError::InvalidParameter(format!(
                "custom support must have a finite lower end below the upper end, got [{}, {}]",
                support.lower, support.upper
            )));
        }
        Ok(TypeDistribution::Custom(CustomLaw {
            name: name.into(),
            law,
        }))
    }

    pub fn support(&self) -> Support {
        match self {
            TypeDistribution::Uniform { lower, upper } => Support {
                lower: *lower,
                upper: *upper,
            },
            TypeDistribution::Exponential { .. } => Support {
                lower: 0.0,
                upper: f64::INFINITY,
            },
            TypeDistribution::Custom(c) => c.law.support(),
        }
    }

    pub fn lower(&self) -> f64 {
        self.support().lower
    }

    pub fn pdf(&self, t: f64) -> f64 {
        match self {
            TypeDistribution::Uniform { lower, upper } => {
                if t < *lower || t > *upper {
                    0.0
                } else {
                    1.0 / (upper - lower)
                }
            }
            TypeDistribution::Exponential { rate } => {
                if t < 0.0 {
                    0.0
                } else {
                    rate * (-rate * t).exp()
                }
            }
            TypeDistribution::Custom(c) => c.law.pdf(t),
        }
    }

    pub fn cdf(&self, t: f64) -> f64 {
        match self {
            TypeDistribution::Uniform { lower, upper } => {
                ((t - lower) / (upper - lower)).clamp(0.0, 1.0)
            }
            TypeDistribution::Exponential { rate } => {
                if t <= 0.0 {
                    0.0
                } else {
                    -(-rate * t).exp_m1()
                }
            }
            TypeDistribution::Custom(c) => c.law.cdf(t),
        }
    }

    /// Inverse distribution function on `[0, 1]`.
    pub fn quantile(&self, u: f64) -> f64 {
        match self {
            TypeDistribution::Uniform { lower, upper } => lower + u * (upper - lower),
            TypeDistribution::Exponential { rate } => -(-u).ln_1p() / rate,
            TypeDistribution::Custom(c) => c.law.quantile(u),
        }
    }

    pub fn mean(&self) -> Option<f64> {
        match self {
            TypeDistribution::Uniform { lower, upper } => Some(0.5 * (lower + upper)),
            TypeDistribution::Exponential { rate } => Some(1.0 / rate),
            TypeDistribution::Custom(_) => None,
        }
    }

    /// Upper limit used for deterministic integrals over the support.
    pub fn integration_upper(&self) -> f64 {
        let s = self.support();
        if s.is_bounded() {
            s.upper
        } else {
            self.quantile(TAIL_QUANTILE)
        }
    }

    /// Draws one type by inversion of a uniform variate on the open unit interval.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.sample(Open01);
        self.quantile(u)
    }

    pub fn check_in_support(&self, t: f64) -> Result<()> {
        let s = self.support();
        if s.contains(t) {
            Ok(())
        } else {
            Err(AuctionError::OutsideSupport {
                value: t,
                lower: s.lower,
                upper: s.upper,
            })
        }
    }

    /// `c(t) = t - (1 - F(t)) / f(t)`.
    pub fn virtual_valuation(&self, t: f64) -> Result<f64> {
        self.check_in_support(t)?;
        match self {
            TypeDistribution::Uniform { upper, .. } => Ok(2.0 * t - upper),
            TypeDistribution::Exponential { rate } => Ok(t - 1.0 / rate),
            TypeDistribution::Custom(c) => {
                let f = c.law.pdf(t);
                if f.is_nan() || f <= 0.0 {
                    return Err(AuctionError::ZeroDensity(t));
                }
                Ok(t - (1.0 - c.law.cdf(t)) / f)
            }
        }
    }

    /// Generalized inverse `inf { t in support : c(t) >= z }`, clamped to the support.
    ///
    /// Fails with [`AuctionError::OutOfRange`] when `z` exceeds `c` at a finite
    /// upper end of the support.
    pub fn inverse_virtual_valuation(&self, z: f64) -> Result<f64> {
        match self {
            TypeDistribution::Uniform { lower, upper } => {
                if z > *upper {
                    return Err(AuctionError::OutOfRange {
                        target: z,
                        max: *upper,
                    });
                }
                Ok((0.5 * (z + upper)).clamp(*lower, *upper))
            }
            TypeDistribution::Exponential { rate } => Ok((z + 1.0 / rate).max(0.0)),
            TypeDistribution::Custom(_) => self.inverse_by_bisection(z),
        }
    }

    fn inverse_by_bisection(&self, z: f64) -> Result<f64> {
        let s = self.support();
        let lower = self.nudged_lower();
        if self.virtual_valuation(lower)? >= z {
            return Ok(s.lower);
        }
        let mut hi = if s.is_bounded() {
            let upper = self.nudged_upper();
            let top = self.virtual_valuation(upper)?;
            if top < z {
                return Err(AuctionError::OutOfRange {
                    target: z,
                    max: top,
                });
            }
            upper
        } else {
            let mut step = 1.0_f64.max(lower.abs());
            let mut hi = lower + step;
            loop {
                if self.virtual_valuation(hi)? >= z {
                    break hi;
                }
                step *= 2.0;
                if !step.is_finite() || step > 1e300 {
                    return Err(AuctionError::OutOfRange {
                        target: z,
                        max: f64::INFINITY,
                    });
                }
                hi = lower + step;
            }
        };
        let mut lo = lower;
        for _ in 0..BISECTION_MAX_ITERS {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.virtual_valuation(mid)? >= z {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        Ok(hi)
    }

    // Endpoints where the density vanishes are moved a hair inside.
    fn nudged_lower(&self) -> f64 {
        let s = self.support();
        if self.pdf(s.lower) > 0.0 {
            return s.lower;
        }
        let scale = if s.is_bounded() { s.width() } else { 1.0 };
        s.lower + 1e-9 * scale
    }

    fn nudged_upper(&self) -> f64 {
        let s = self.support();
        if self.pdf(s.upper) > 0.0 {
            return s.upper;
        }
        s.upper - 1e-9 * s.width()
    }

    /// Evaluates `c` on a grid across the support and reports the first place it
    /// decreases by more than [`REGULARITY_TOLERANCE`].
    pub fn check_regularity(&self, grid_points: usize) -> RegularityReport {
        let grid_points = grid_points.max(2);
        let s = self.support();
        let grid: Vec<f64> = if s.is_bounded() {
            let (a, b) = (self.nudged_lower(), self.nudged_upper());
            (0..grid_points)
                .map(|k| a + (b - a) * k as f64 / (grid_points - 1) as f64)
                .collect()
        } else {
            let (qa, qb) = (1e-6, 1.0 - 1e-6);
            (0..grid_points)
                .map(|k| self.quantile(qa + (qb - qa) * k as f64 / (grid_points - 1) as f64))
                .collect()
        };

        let mut prev: Option<(f64, f64)> = None;
        let mut max_drop = 0.0_f64;
        let mut violation = None;
        for &t in &grid {
            let c = match self.virtual_valuation(t) {
                Ok(c) => c,
                Err(e) => {
                    return RegularityReport {
                        passed: false,
                        grid_points,
                        max_drop: f64::NAN,
                        violation: None,
                        note: Some(e.to_string()),
                    }
                }
            };
            if let Some((tp, cp)) = prev {
                let drop = cp - c;
                max_drop = max_drop.max(drop);
                if drop > REGULARITY_TOLERANCE && violation.is_none() {
                    violation = Some(RegularityViolation {
                        t_before: tp,
                        c_before: cp,
                        t_after: t,
                        c_after: c,
                    });
                }
            }
            prev = Some((t, c));
        }
        RegularityReport {
            passed: violation.is_none(),
            grid_points,
            max_drop,
            violation,
            note: None,
        }
    }

    pub fn to_spec(&self) -> Result<DistributionSpec> {
        match self {
            TypeDistribution::Uniform { lower, upper } => Ok(DistributionSpec::Uniform {
                lower: *lower,
                upper: *upper,
            }),
            TypeDistribution::Exponential { rate } => {
                Ok(DistributionSpec::Exponential { rate: *rate })
            }
            TypeDistribution::Custom(c) => Err(AuctionError::Config(format!(
                "custom distribution '{}' has no JSON representation",
                c.name
            ))),
        }
    }
}

/// Adjacent grid points where `c` decreased.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RegularityViolation {
    pub t_before: f64,
    pub c_before: f64,
    pub t_after: f64,
    pub c_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegularityReport {
    pub passed: bool,
    pub grid_points: usize,
    /// Largest observed decrease between adjacent grid points (0 if none).
    pub max_drop: f64,
    pub violation: Option<RegularityViolation>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

/// JSON form of a distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DistributionSpec {
    Uniform { lower: f64, upper: f64 },
    Exponential { rate: f64 },
}

impl DistributionSpec {
    pub fn build(&self) -> Result<TypeDistribution> {
        match *self {
            DistributionSpec::Uniform { lower, upper } => TypeDistribution::uniform(lower, upper),
            DistributionSpec::Exponential { rate } => TypeDistribution::exponential(rate),
        }
    }
}

/// One realization (or report vector) of all user types.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TypeProfile(pub Vec<f64>);

impl TypeProfile {
    pub fn new(values: Vec<f64>) -> Self {
        TypeProfile(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, j: usize) -> f64 {
        self.0[j]
    }

    /// Copy of this profile with user `j`'s entry replaced.
    pub fn with_value(&self, j: usize, value: f64) -> TypeProfile {
        let mut v = self.0.clone();
        v[j] = value;
        TypeProfile(v)
    }

    pub fn draw<R: Rng + ?Sized>(dists: &[TypeDistribution], rng: &mut R) -> TypeProfile {
        TypeProfile(dists.iter().map(|d| d.sample(rng)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn u14() -> TypeDistribution {
        TypeDistribution::uniform(1.0, 4.0).unwrap()
    }

    /// Two-component uniform mixture on [0, 10]; the density drops sharply at 1.
    #[derive(Debug)]
    struct Bimodal;

    impl ContinuousLaw for Bimodal {
        fn pdf(&self, t: f64) -> f64 {
            if !(0.0..=10.0).contains(&t) {
                0.0
            } else if t <= 1.0 {
                0.9 + 0.01
            } else {
                0.01
            }
        }
        fn cdf(&self, t: f64) -> f64 {
            if t <= 0.0 {
                0.0
            } else if t <= 1.0 {
                0.91 * t
            } else if t < 10.0 {
                0.91 + 0.01 * (t - 1.0)
            } else {
                1.0
            }
        }
        fn support(&self) -> Support {
            Support {
                lower: 0.0,
                upper: 10.0,
            }
        }
    }

    /// Uniform[1, 4] written out generically, to exercise the bisection paths.
    #[derive(Debug)]
    struct GenericUniform;

    impl ContinuousLaw for GenericUniform {
        fn pdf(&self, t: f64) -> f64 {
            if (1.0..=4.0).contains(&t) {
                1.0 / 3.0
            } else {
                0.0
            }
        }
        fn cdf(&self, t: f64) -> f64 {
            ((t - 1.0) / 3.0).clamp(0.0, 1.0)
        }
        fn support(&self) -> Support {
            Support {
                lower: 1.0,
                upper: 4.0,
            }
        }
    }

    #[test]
    fn virtual_valuation_examples() {
        assert_eq!(u14().virtual_valuation(4.0).unwrap(), 4.0);
        assert_eq!(u14().virtual_valuation(2.5).unwrap(), 1.0);
        let e = TypeDistribution::exponential(0.1).unwrap();
        assert!(e.virtual_valuation(10.0).unwrap().abs() < 1e-12);
    }

    #[test]
    fn virtual_valuation_rejects_outside_support() {
        assert!(matches!(
            u14().virtual_valuation(0.5),
            Err(AuctionError::OutsideSupport { .. })
        ));
        let e = TypeDistribution::exponential(1.0).unwrap();
        assert!(e.virtual_valuation(-0.1).is_err());
    }

    #[test]
    fn closed_form_matches_generic_formula() {
        let generic = TypeDistribution::custom("u14", Arc::new(GenericUniform)).unwrap();
        for k in 0..=30 {
            let t = 1.0 + 3.0 * k as f64 / 30.0;
            let a = u14().virtual_valuation(t).unwrap();
            let b = generic.virtual_valuation(t).unwrap();
            assert!((a - b).abs() < 1e-12, "t={t}: {a} vs {b}");
        }
        let e = TypeDistribution::exponential(0.3).unwrap();
        for k in 0..20 {
            let t = 0.5 * k as f64;
            let generic = t - (1.0 - e.cdf(t)) / e.pdf(t);
            assert!((e.virtual_valuation(t).unwrap() - generic).abs() < 1e-9);
        }
    }

    #[test]
    fn inverse_examples() {
        assert_eq!(u14().inverse_virtual_valuation(1.0).unwrap(), 2.5);
        assert_eq!(u14().virtual_valuation(2.5).unwrap(), 1.0);
        assert_eq!(u14().inverse_virtual_valuation(-5.0).unwrap(), 1.0);
        let e = TypeDistribution::exponential(0.5).unwrap();
        assert_eq!(e.inverse_virtual_valuation(0.0).unwrap(), 2.0);
        assert_eq!(e.inverse_virtual_valuation(-10.0).unwrap(), 0.0);
    }

    #[test]
    fn inverse_above_range_is_an_error() {
        assert!(matches!(
            u14().inverse_virtual_valuation(4.5),
            Err(AuctionError::OutOfRange { .. })
        ));
        assert_eq!(u14().inverse_virtual_valuation(4.0).unwrap(), 4.0);
        let generic = TypeDistribution::custom("u14", Arc::new(GenericUniform)).unwrap();
        assert!(generic.inverse_virtual_valuation(4.5).is_err());
    }

    #[test]
    fn bisection_inverse_agrees_with_closed_form() {
        let generic = TypeDistribution::custom("u14", Arc::new(GenericUniform)).unwrap();
        for k in 0..=40 {
            let z = -6.0 + 10.0 * k as f64 / 40.0;
            let a = u14().inverse_virtual_valuation(z).unwrap();
            let b = generic.inverse_virtual_valuation(z).unwrap();
            assert!((a - b).abs() < 1e-9, "z={z}: {a} vs {b}");
        }
    }

    #[test]
    fn regularity_of_standard_families() {
        assert!(u14().check_regularity(200).passed);
        let e = TypeDistribution::exponential(0.1).unwrap();
        let report = e.check_regularity(200);
        assert!(report.passed);
        assert_eq!(report.max_drop, 0.0);
    }

    #[test]
    fn regularity_detects_bimodal_mixture() {
        let d = TypeDistribution::custom("bimodal", Arc::new(Bimodal)).unwrap();
        let report = d.check_regularity(101);
        assert!(!report.passed);
        let v = report.violation.unwrap();
        assert!(v.t_before <= 1.0 && v.t_after > 1.0);
        assert!(v.c_after < v.c_before);
        // hand values: c(1-) = 1 - 0.09/0.91, c(1+) ~ 1 - 0.09/0.01
        let left = d.virtual_valuation(1.0).unwrap();
        let right = d.virtual_valuation(1.0 + 1e-9).unwrap();
        assert!((left - (1.0 - 0.09 / 0.91)).abs() < 1e-12);
        assert!((right - (1.0 - 9.0)).abs() < 1e-6);
    }

    #[test]
    fn sampling_by_inversion() {
        assert_eq!(u14().quantile(0.5), 2.5);
        let e = TypeDistribution::exponential(0.1).unwrap();
        assert!(e.quantile(1e-300) >= 0.0 && e.quantile(1e-300) < 1e-290);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut r2 = ChaCha8Rng::seed_from_u64(7);
        assert_eq!(u14().sample(&mut rng), u14().sample(&mut r2));
    }

    #[test]
    fn uniform_sample_mean_within_clt_bound() {
        let d = u14();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let n = 100_000;
        let mean = (0..n).map(|_| d.sample(&mut rng)).sum::<f64>() / n as f64;
        let sigma = (9.0_f64 / 12.0).sqrt() / (n as f64).sqrt();
        assert!((mean - 2.5).abs() < 5.0 * sigma, "mean {mean}");
    }

    #[test]
    fn cdf_grid_is_monotone_with_correct_endpoints() {
        let e = TypeDistribution::exponential(0.25).unwrap();
        assert_eq!(e.cdf(0.0), 0.0);
        assert!((e.cdf(1e4) - 1.0).abs() < 1e-12);
        let mut prev = 0.0;
        for k in 0..500 {
            let f = e.cdf(0.1 * k as f64);
            assert!(f >= prev);
            prev = f;
        }
        assert_eq!(u14().cdf(1.0), 0.0);
        assert_eq!(u14().cdf(4.0), 1.0);
    }

    #[test]
    fn invalid_parameters_rejected() {
        assert!(TypeDistribution::uniform(2.0, 2.0).is_err());
        assert!(TypeDistribution::uniform(3.0, 1.0).is_err());
        assert!(TypeDistribution::exponential(0.0).is_err());
        assert!(TypeDistribution::exponential(-1.0).is_err());
    }

    #[test]
    fn json_schema() {
        let spec: DistributionSpec =
            serde_json::from_str(r#"{"kind":"uniform","lower":1.0,"upper":4.0}"#).unwrap();
        assert_eq!(spec.build().unwrap(), u14());
        let spec: DistributionSpec =
            serde_json::from_str(r#"{"kind":"exponential","rate":0.1}"#).unwrap();
        assert_eq!(
            spec.build().unwrap(),
            TypeDistribution::Exponential { rate: 0.1 }
        );
        assert!(serde_json::from_str::<DistributionSpec>(
            r#"{"kind":"exponential","rate":0.1,"mean":10}"#
        )
        .is_err());
    }
}
