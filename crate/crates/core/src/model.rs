//! The static market: who wants which content, what contents cost, how
//! delivery quality is priced, and each user's type distribution.
//!
//! Indices are 0-based in memory. JSON documents use 1-based user ids.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{DistributionSpec, TypeDistribution};
use crate::error::{AuctionError, Result};

/// Grid size used when an instance is built in strict-regularity mode.
pub const REGULARITY_GRID: usize = 512;

const INVERSE_TOLERANCE: f64 = 1e-10;

/// Interest sets kept in both directions: `Ω_i` (users of content `i`) and
/// `S_j` (contents of user `j`).
#[derive(Debug, Clone, PartialEq)]
pub struct InterestStructure {
    num_contents: usize,
    num_users: usize,
    users_of: Vec<Vec<usize>>,
    contents_of: Vec<Vec<usize>>,
    membership: Vec<bool>,
}

impl InterestStructure {
    /// Builds from 0-based per-content user lists. Lists are sorted; duplicates
    /// and out-of-range ids are rejected.
    pub fn new(num_users: usize, users_of: Vec<Vec<usize>>) -> Result<Self> {
        let num_contents = users_of.len();
        if num_contents == 0 || num_users == 0 {
            return Err(AuctionError::InvalidParameter(
                "need at least one content and one user".into(),
            ));
        }
        let mut membership = vec![false; num_contents * num_users];
        let mut contents_of = vec![Vec::new(); num_users];
        let mut sorted = Vec::with_capacity(num_contents);
        for (i, set) in users_of.into_iter().enumerate() {
            let mut set = set;
            set.sort_unstable();
            for w in set.windows(2) {
                if w[0] == w[1] {
                    return Err(AuctionError::InvalidParameter(format!(
                        "user {} listed twice for content {}",
                        w[0] + 1,
                        i + 1
                    )));
                }
            }
            for &j in &set {
                if j >= num_users {
                    return Err(AuctionError::IndexOutOfRange {
                        what: "user",
                        index: j + 1,
                        len: num_users,
                    });
                }
                membership[i * num_users + j] = true;
                contents_of[j].push(i);
            }
            sorted.push(set);
        }
        Ok(InterestStructure {
            num_contents,
            num_users,
            users_of: sorted,
            contents_of,
            membership,
        })
    }

    /// Builds from 1-based user ids, as used in JSON documents.
    pub fn from_one_based(num_users: usize, sets: &[Vec<usize>]) -> Result<Self> {
        let mut zero_based = Vec::with_capacity(sets.len());
        for (i, set) in sets.iter().enumerate() {
            if set.contains(&0) {
                return Err(AuctionError::InvalidParameter(format!(
                    "user id 0 in interest set of content {} (ids are 1-based)",
                    i + 1
                )));
            }
            zero_based.push(set.iter().map(|j| j - 1).collect());
        }
        Self::new(num_users, zero_based)
    }

    pub fn to_one_based(&self) -> Vec<Vec<usize>> {
        self.users_of
            .iter()
            .map(|set| set.iter().map(|j| j + 1).collect())
            .collect()
    }

    pub fn num_contents(&self) -> usize {
        self.num_contents
    }

    pub fn num_users(&self) -> usize {
        self.num_users
    }

    /// `Ω_i`.
    pub fn users_of(&self, content: usize) -> &[usize] {
        &self.users_of[content]
    }

    /// `S_j`.
    pub fn contents_of(&self, user: usize) -> &[usize] {
        &self.contents_of[user]
    }

    pub fn is_interested(&self, user: usize, content: usize) -> bool {
        self.membership[content * self.num_users + user]
    }
}

/// Per-user delivery cost `h(θ)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum CostFunction {
    /// `α θ²`
    Quadratic { alpha: f64 },
    /// `α θ^d`, `d > 1`
    Power { alpha: f64, exponent: f64 },
    /// `Σ_k a_k θ^k` with `a_0 = a_1 = 0` and nonnegative coefficients.
    Polynomial { coefficients: Vec<f64> },
}

impl CostFunction {
    pub fn quadratic(alpha: f64) -> Result<Self> {
        let c = CostFunction::Quadratic { alpha };
        c.validate()?;
        Ok(c)
    }

    /// Checks `h(0) = 0`, convexity, `h'(0) = 0` and unbounded `h'`.
    pub fn validate(&self) -> Result<()> {
        match self {
            CostFunction::Quadratic { alpha } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(AuctionError::InvalidCost(format!(
                        "quadratic alpha must be positive, got {alpha}"
                    )));
                }
            }
            CostFunction::Power { alpha, exponent } => {
                if !(alpha.is_finite() && *alpha > 0.0) {
                    return Err(AuctionError::InvalidCost(format!(
                        "power alpha must be positive, got {alpha}"
                    )));
                }
                if !(exponent.is_finite() && *exponent > 1.0) {
                    return Err(AuctionError::InvalidCost(format!(
                        "power exponent must exceed 1, got {exponent}"
                    )));
                }
            }
            CostFunction::Polynomial { coefficients } => {
                if coefficients.iter().any(|a| !a.is_finite() || *a < 0.0) {
                    return Err(AuctionError::InvalidCost(
                        "polynomial coefficients must be finite and nonnegative".into(),
                    ));
                }
                if coefficients.first().copied().unwrap_or(0.0) != 0.0 {
                    return Err(AuctionError::InvalidCost("h(0) must be 0".into()));
                }
                if coefficients.get(1).copied().unwrap_or(0.0) != 0.0 {
                    return Err(AuctionError::InvalidCost("h'(0) must be 0".into()));
                }
                if !coefficients.iter().skip(2).any(|a| *a > 0.0) {
                    return Err(AuctionError::InvalidCost(
                        "h' must be strictly increasing and unbounded (need a positive coefficient of degree >= 2)"
                            .into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn value(&self, theta: f64) -> f64 {
        match self {
            CostFunction::Quadratic { alpha } => alpha * theta * theta,
            CostFunction::Power { alpha, exponent } => alpha * theta.powf(*exponent),
            CostFunction::Polynomial { coefficients } => coefficients
                .iter()
                .rev()
                .fold(0.0, |acc, a| acc * theta + a),
        }
    }

    pub fn derivative(&self, theta: f64) -> f64 {
        match self {
            CostFunction::Quadratic { alpha } => 2.0 * alpha * theta,
            CostFunction::Power { alpha, exponent } => {
                alpha * exponent * theta.powf(exponent - 1.0)
            }
            CostFunction::Polynomial { coefficients } => coefficients
                .iter()
                .enumerate()
                .skip(1)
                .rev()
                .fold(0.0, |acc, (k, a)| acc * theta + k as f64 * a),
        }
    }

    /// `(h')⁻¹(y)` for `y >= 0`.
    pub fn inverse_derivative(&self, y: f64) -> Result<f64> {
        if !(y.is_finite() && y >= 0.0) {
            return Err(AuctionError::InvalidParameter(format!(
                "inverse derivative needs a finite y >= 0, got {y}"
            )));
        }
        match self {
            CostFunction::Quadratic { alpha } => Ok(y / (2.0 * alpha)),
            CostFunction::Power { alpha, exponent } => {
                Ok((y / (alpha * exponent)).powf(1.0 / (exponent - 1.0)))
            }
            CostFunction::Polynomial { .. } => Ok(self.inverse_derivative_by_bisection(y)),
        }
    }

    /// Bisection fallback; the bracket grows geometrically until it holds `y`.
    pub fn inverse_derivative_by_bisection(&self, y: f64) -> f64 {
        if y <= 0.0 {
            return 0.0;
        }
        let mut hi = 1.0;
        while self.derivative(hi) < y {
            hi *= 2.0;
        }
        let mut lo = 0.0;
        while hi - lo > INVERSE_TOLERANCE * hi.max(1.0) * 1e-3 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if self.derivative(mid) < y {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }
}

/// Independent Bernoulli inclusion of each user in each content's interest set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopularityModel {
    pub q: Vec<f64>,
    pub seed: u64,
}

impl PopularityModel {
    pub fn validate(&self) -> Result<()> {
        if self.q.is_empty() {
            return Err(AuctionError::InvalidParameter(
                "popularity needs at least one content".into(),
            ));
        }
        if let Some(q) = self.q.iter().find(|q| !(0.0..=1.0).contains(*q)) {
            return Err(AuctionError::InvalidParameter(format!(
                "inclusion probability {q} outside [0, 1]"
            )));
        }
        Ok(())
    }
}

/// Places every user in every `Ω_i` independently with probability `q_i`.
/// Deterministic in the model's seed.
pub fn sample_interest_structure(pop: &PopularityModel, n: usize) -> Result<InterestStructure> {
    pop.validate()?;
    if n == 0 {
        return Err(AuctionError::InvalidParameter(
            "n must be at least 1".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(pop.seed);
    let sets = pop
        .q
        .iter()
        .map(|&q| (0..n).filter(|_| rng.gen::<f64>() < q).collect())
        .collect();
    InterestStructure::new(n, sets)
}

/// The full auction market. Immutable once built; use the `with_*` methods to
/// derive variants.
#[derive(Debug, Clone, PartialEq)]
pub struct AuctionInstance {
    interests: InterestStructure,
    prices: Vec<f64>,
    cost: CostFunction,
    theta: f64,
    distributions: Vec<TypeDistribution>,
}

impl AuctionInstance {
    pub fn new(
        interests: InterestStructure,
        prices: Vec<f64>,
        cost: CostFunction,
        theta: f64,
        distributions: Vec<TypeDistribution>,
    ) -> Result<Self> {
        if prices.len() != interests.num_contents() {
            return Err(AuctionError::DimensionMismatch(format!(
                "{} content prices for {} contents",
                prices.len(),
                interests.num_contents()
            )));
        }
        if distributions.len() != interests.num_users() {
            return Err(AuctionError::DimensionMismatch(format!(
                "{} distributions for {} users",
                distributions.len(),
                interests.num_users()
            )));
        }
        if let Some(r) = prices.iter().find(|r| !(r.is_finite() && **r >= 0.0)) {
            return Err(AuctionError::InvalidParameter(format!(
                "content price {r} must be finite and nonnegative"
            )));
        }
        if !(theta.is_finite() && theta > 0.0) {
            return Err(AuctionError::InvalidParameter(format!(
                "theta must be positive, got {theta}"
            )));
        }
        cost.validate()?;
        Ok(AuctionInstance {
            interests,
            prices,
            cost,
            theta,
            distributions,
        })
    }

    pub fn interests(&self) -> &InterestStructure {
        &self.interests
    }

    pub fn num_contents(&self) -> usize {
        self.interests.num_contents()
    }

    pub fn num_users(&self) -> usize {
        self.interests.num_users()
    }

    pub fn prices(&self) -> &[f64] {
        &self.prices
    }

    pub fn cost(&self) -> &CostFunction {
        &self.cost
    }

    pub fn theta(&self) -> f64 {
        self.theta
    }

    /// `h(θ)` at the instance's quality.
    pub fn delivery_cost(&self) -> f64 {
        self.cost.value(self.theta)
    }

    pub fn distributions(&self) -> &[TypeDistribution] {
        &self.distributions
    }

    pub fn distribution(&self, user: usize) -> &TypeDistribution {
        &self.distributions[user]
    }

    pub fn with_theta(&self, theta: f64) -> Result<Self> {
        Self::new(
            self.interests.clone(),
            self.prices.clone(),
            self.cost.clone(),
            theta,
            self.distributions.clone(),
        )
    }

    pub fn with_cost(&self, cost: CostFunction) -> Result<Self> {
        Self::new(
            self.interests.clone(),
            self.prices.clone(),
            cost,
            self.theta,
            self.distributions.clone(),
        )
    }

    pub fn with_prices(&self, prices: Vec<f64>) -> Result<Self> {
        Self::new(
            self.interests.clone(),
            prices,
            self.cost.clone(),
            self.theta,
            self.distributions.clone(),
        )
    }

    pub fn with_distributions(&self, distributions: Vec<TypeDistribution>) -> Result<Self> {
        Self::new(
            self.interests.clone(),
            self.prices.clone(),
            self.cost.clone(),
            self.theta,
            distributions,
        )
    }

    pub fn with_interests(&self, interests: InterestStructure) -> Result<Self> {
        Self::new(
            interests,
            self.prices.clone(),
            self.cost.clone(),
            self.theta,
            self.distributions.clone(),
        )
    }

    /// Fails on the first user whose virtual valuation is not nondecreasing.
    pub fn verify_regularity(&self, grid_points: usize) -> Result<()> {
        for (j, d) in self.distributions.iter().enumerate() {
            let report = d.check_regularity(grid_points);
            if !report.passed {
                return Err(AuctionError::Irregular(format!(
                    "user {}: {:?}",
                    j + 1,
                    report.violation
                )));
            }
        }
        Ok(())
    }

    pub fn to_config(&self) -> Result<InstanceConfig> {
        Ok(InstanceConfig {
            num_contents: self.num_contents(),
            num_users: self.num_users(),
            interest_sets: Some(self.interests.to_one_based()),
            popularity: None,
            content_prices: self.prices.clone(),
            cost: self.cost.clone(),
            theta: self.theta,
            distributions: self
                .distributions
                .iter()
                .map(TypeDistribution::to_spec)
                .collect::<Result<_>>()?,
            strict_regularity: None,
        })
    }
}

/// JSON document describing an instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceConfig {
    pub num_contents: usize,
    pub num_users: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub interest_sets: Option<Vec<Vec<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub popularity: Option<PopularityModel>,
    pub content_prices: Vec<f64>,
    pub cost: CostFunction,
    pub theta: f64,
    pub distributions: Vec<DistributionSpec>,
    /// Defaults to on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strict_regularity: Option<bool>,
}

impl InstanceConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Validates a config and materializes the instance (including both
/// directions of the interest structure).
pub fn build_instance(config: &InstanceConfig) -> Result<AuctionInstance> {
    if config.num_contents == 0 || config.num_users == 0 {
        return Err(AuctionError::InvalidParameter(
            "num_contents and num_users must be at least 1".into(),
        ));
    }
    let interests = match (&config.interest_sets, &config.popularity) {
        (Some(sets), None) => {
            if sets.len() != config.num_contents {
                return Err(AuctionError::DimensionMismatch(format!(
                    "{} interest sets for {} contents",
                    sets.len(),
                    config.num_contents
                )));
            }
            InterestStructure::from_one_based(config.num_users, sets)?
        }
        (None, Some(pop)) => {
            if pop.q.len() != config.num_contents {
                return Err(AuctionError::DimensionMismatch(format!(
                    "{} popularity entries for {} contents",
                    pop.q.len(),
                    config.num_contents
                )));
            }
            sample_interest_structure(pop, config.num_users)?
        }
        _ => {
            return Err(AuctionError::Config(
                "exactly one of interest_sets and popularity must be given".into(),
            ))
        }
    };
    let distributions = config
        .distributions
        .iter()
        .map(DistributionSpec::build)
        .collect::<Result<Vec<_>>>()?;
    let instance = AuctionInstance::new(
        interests,
        config.content_prices.clone(),
        config.cost.clone(),
        config.theta,
        distributions,
    )?;
    if config.strict_regularity.unwrap_or(true) {
        instance.verify_regularity(REGULARITY_GRID)?;
    }
    Ok(instance)
}
