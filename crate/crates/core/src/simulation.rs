//! Monte-Carlo estimators.
//!
//! Every trial `k` draws its types from its own ChaCha stream keyed by
//! `(seed, k)`, so any two estimators run with the same seed see the same
//! draws (common random numbers) and results do not depend on the number of
//! worker threads. Trials are folded in fixed-size chunks and the chunk
//! summaries are merged in order, which keeps reports bit-identical.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::distributions::{TypeDistribution, TypeProfile};
use crate::error::{AuctionError, Result};
use crate::mechanism::{self, run_mechanism};
use crate::model::AuctionInstance;

pub const DEFAULT_TRIALS: usize = 10_000;

/// Statistical pass threshold in standard errors.
pub const DEFAULT_SIGMA: f64 = 3.0;

/// Absolute slack for comparisons that hold exactly up to float rounding.
pub const ROUNDING_TOLERANCE: f64 = 1e-9;

const CHUNK: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EstimateWithError {
    pub mean: f64,
    /// Sample standard deviation over `sqrt(trials)`.
    pub std_error: f64,
    pub trials: usize,
}

impl EstimateWithError {
    pub fn from_samples(samples: &[f64]) -> Self {
        let mut m = Moments::default();
        for &x in samples {
            m.push(x);
        }
        m.estimate()
    }

    /// `sqrt(se_a² + se_b²)`.
    pub fn combined_std_error(&self, other: &EstimateWithError) -> f64 {
        self.std_error.hypot(other.std_error)
    }

    /// True when `|mean - value| <= k·se + ROUNDING_TOLERANCE`.
    pub fn agrees_with(&self, value: f64, k: f64) -> bool {
        (self.mean - value).abs() <= k * self.std_error + ROUNDING_TOLERANCE
    }
}

/// Streaming mean and sum of squared deviations, mergeable in a fixed order.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    pub fn push(&mut self, x: f64) {
        self.n += 1;
        let delta = x - self.mean;
        self.mean += delta / self.n as f64;
        self.m2 += delta * (x - self.mean);
    }

    pub fn merge(&mut self, other: &Moments) {
        if other.n == 0 {
            return;
        }
        if self.n == 0 {
            *self = *other;
            return;
        }
        let n = self.n + other.n;
        let delta = other.mean - self.mean;
        self.mean += delta * other.n as f64 / n as f64;
        self.m2 += other.m2 + delta * delta * (self.n as f64) * (other.n as f64) / n as f64;
        self.n = n;
    }

    pub fn count(&self) -> u64 {
        self.n
    }

    pub fn estimate(&self) -> EstimateWithError {
        let std_error = if self.n > 1 {
            (self.m2.max(0.0) / (self.n - 1) as f64).sqrt() / (self.n as f64).sqrt()
        } else {
            0.0
        };
        EstimateWithError {
            mean: if self.n == 0 { f64::NAN } else { self.mean },
            std_error,
            trials: self.n as usize,
        }
    }
}

/// The random stream of trial `trial` under `seed`.
pub fn trial_rng(seed: u64, trial: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(trial as u64);
    rng
}

/// Truthful type profile of trial `trial`.
pub fn draw_profile(dists: &[TypeDistribution], seed: u64, trial: usize) -> TypeProfile {
    TypeProfile::draw(dists, &mut trial_rng(seed, trial))
}

/// Chunked parallel fold over trial indices with an order-fixed merge.
pub(crate) fn fold_trials<A, I, S, M>(trials: usize, init: I, step: S, merge: M) -> Result<A>
where
    A: Send,
    I: Fn() -> A + Sync,
    S: Fn(&mut A, usize) -> Result<()> + Sync,
    M: Fn(&mut A, A),
{
    let chunks = trials.div_ceil(CHUNK);
    let parts = (0..chunks)
        .into_par_iter()
        .map(|c| {
            let mut acc = init();
            for k in c * CHUNK..((c + 1) * CHUNK).min(trials) {
                step(&mut acc, k)?;
            }
            Ok(acc)
        })
        .collect::<Result<Vec<A>>>()?;
    let mut total = init();
    for p in parts {
        merge(&mut total, p);
    }
    Ok(total)
}

/// Per-user expectations under truthful play.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UserStats {
    /// 1-based user id.
    pub user: usize,
    pub expected_payment: EstimateWithError,
    pub expected_utility: EstimateWithError,
    pub expected_fraction: EstimateWithError,
}

/// Realizations that broke a property the mechanism guarantees exactly.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct PropertyAudit {
    pub realizations: usize,
    /// A user with no wanted content cached but a nonzero payment.
    pub zero_payment_violations: usize,
    /// `x_j > θ t_j Σ_{i∈S_j} p_i`.
    pub payment_bound_violations: usize,
    /// `x_j < 0` beyond rounding.
    pub negative_payments: usize,
    /// Fractions outside {0, 1} or summing above 1.
    pub feasibility_violations: usize,
}

impl PropertyAudit {
    pub fn is_clean(&self) -> bool {
        self.zero_payment_violations == 0
            && self.payment_bound_violations == 0
            && self.negative_payments == 0
            && self.feasibility_violations == 0
    }

    fn merge(&mut self, other: &PropertyAudit) {
        self.realizations += other.realizations;
        self.zero_payment_violations += other.zero_payment_violations;
        self.payment_bound_violations += other.payment_bound_violations;
        self.negative_payments += other.negative_payments;
        self.feasibility_violations += other.feasibility_violations;
    }

    fn record(&mut self, inst: &AuctionInstance, t: &TypeProfile, o: &mechanism::MechanismOutcome) {
        self.realizations += 1;
        let fr = &o.allocation.fractions;
        if fr.iter().any(|&p| p != 0.0 && p != 1.0) || o.allocation.total() > 1.0 {
            self.feasibility_violations += 1;
        }
        for j in 0..inst.num_users() {
            let frac = o.user_fraction(inst, j);
            let x = o.payments[j];
            if frac == 0.0 && x != 0.0 {
                self.zero_payment_violations += 1;
            }
            if x > inst.theta() * t.get(j) * frac {
                self.payment_bound_violations += 1;
            }
            if x < -ROUNDING_TOLERANCE {
                self.negative_payments += 1;
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimulationReport {
    /// Average realized profit (payments minus costs).
    pub er_direct: EstimateWithError,
    /// Average `max(0, max_i score_i)`.
    pub er_virtual: EstimateWithError,
    /// Paired difference `er_direct - er_virtual` on the same draws.
    pub revenue_gap: EstimateWithError,
    pub expected_allocation: Vec<EstimateWithError>,
    pub per_user: Vec<UserStats>,
    pub idle_fraction: EstimateWithError,
    /// Mean over users of the ex-post utility.
    pub avg_user_utility: EstimateWithError,
    pub audit: PropertyAudit,
}

impl SimulationReport {
    pub fn revenue_forms_agree(&self, sigma: f64) -> bool {
        (self.er_direct.mean - self.er_virtual.mean).abs()
            <= sigma * self.er_direct.combined_std_error(&self.er_virtual) + ROUNDING_TOLERANCE
    }
}

#[derive(Clone)]
struct SimAccumulator {
    direct: Moments,
    virt: Moments,
    gap: Moments,
    alloc: Vec<Moments>,
    payment: Vec<Moments>,
    utility: Vec<Moments>,
    fraction: Vec<Moments>,
    idle: Moments,
    avg_utility: Moments,
    audit: PropertyAudit,
}

impl SimAccumulator {
    fn new(m: usize, n: usize) -> Self {
        SimAccumulator {
            direct: Moments::default(),
            virt: Moments::default(),
            gap: Moments::default(),
            alloc: vec![Moments::default(); m],
            payment: vec![Moments::default(); n],
            utility: vec![Moments::default(); n],
            fraction: vec![Moments::default(); n],
            idle: Moments::default(),
            avg_utility: Moments::default(),
            audit: PropertyAudit::default(),
        }
    }

    fn merge(&mut self, other: SimAccumulator) {
        self.direct.merge(&other.direct);
        self.virt.merge(&other.virt);
        self.gap.merge(&other.gap);
        for (a, b) in self.alloc.iter_mut().zip(&other.alloc) {
            a.merge(b);
        }
        for (a, b) in self.payment.iter_mut().zip(&other.payment) {
            a.merge(b);
        }
        for (a, b) in self.utility.iter_mut().zip(&other.utility) {
            a.merge(b);
        }
        for (a, b) in self.fraction.iter_mut().zip(&other.fraction) {
            a.merge(b);
        }
        self.idle.merge(&other.idle);
        self.avg_utility.merge(&other.avg_utility);
        self.audit.merge(&other.audit);
    }

    fn into_report(self) -> SimulationReport {
        SimulationReport {
            er_direct: self.direct.estimate(),
            er_virtual: self.virt.estimate(),
            revenue_gap: self.gap.estimate(),
            expected_allocation: self.alloc.iter().map(Moments::estimate).collect(),
            per_user: (0..self.payment.len())
                .map(|j| UserStats {
                    user: j + 1,
                    expected_payment: self.payment[j].estimate(),
                    expected_utility: self.utility[j].estimate(),
                    expected_fraction: self.fraction[j].estimate(),
                })
                .collect(),
            idle_fraction: self.idle.estimate(),
            avg_user_utility: self.avg_utility.estimate(),
            audit: self.audit,
        }
    }
}

/// Runs the mechanism on `trials` truthful profiles drawn from `types_from`
/// and mapped through `to_report` before being fed to `mechanism_inst`.
fn simulate_with(
    mechanism_inst: &AuctionInstance,
    types_from: &[TypeDistribution],
    to_report: impl Fn(&TypeProfile) -> TypeProfile + Sync,
    trials: usize,
    seed: u64,
) -> Result<SimulationReport> {
    if trials == 0 {
        return Err(AuctionError::InvalidParameter(
            "trials must be at least 1".into(),
        ));
    }
    let (m, n) = (mechanism_inst.num_contents(), mechanism_inst.num_users());
    let theta = mechanism_inst.theta();
    let acc = fold_trials(
        trials,
        || SimAccumulator::new(m, n),
        |acc, k| {
            let truth = draw_profile(types_from, seed, k);
            let reports = to_report(&truth);
            let o = run_mechanism(mechanism_inst, &reports)?;
            acc.audit.record(mechanism_inst, &reports, &o);
            acc.direct.push(o.realized_sp_profit);
            acc.virt.push(o.virtual_surplus);
            acc.gap.push(o.realized_sp_profit - o.virtual_surplus);
            for (a, &p) in acc.alloc.iter_mut().zip(&o.allocation.fractions) {
                a.push(p);
            }
            acc.idle.push(1.0 - o.allocation.total());
            let mut utility_sum = 0.0;
            for j in 0..n {
                let frac = o.user_fraction(mechanism_inst, j);
                let u = frac * theta * truth.get(j) - o.payments[j];
                acc.payment[j].push(o.payments[j]);
                acc.utility[j].push(u);
                acc.fraction[j].push(frac);
                utility_sum += u;
            }
            acc.avg_utility.push(utility_sum / n as f64);
            Ok(())
        },
        |a, b| a.merge(b),
    )?;
    Ok(acc.into_report())
}

/// Truthful-play Monte-Carlo estimate of every expected quantity.
pub fn simulate(inst: &AuctionInstance, trials: usize, seed: u64) -> Result<SimulationReport> {
    simulate_with(inst, inst.distributions(), |t| t.clone(), trials, seed)
}

/// How a single user's cache fraction and payment are computed. The optimal
/// rule is [`OptimalRule`]; other rules exist to test the verifiers.
pub trait UserRule: Sync {
    fn user_outcome(
        &self,
        inst: &AuctionInstance,
        reports: &TypeProfile,
        j: usize,
    ) -> Result<(f64, f64)>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct OptimalRule;

impl UserRule for OptimalRule {
    fn user_outcome(
        &self,
        inst: &AuctionInstance,
        reports: &TypeProfile,
        j: usize,
    ) -> Result<(f64, f64)> {
        mechanism::user_outcome(inst, reports, j)
    }
}

/// Optimal allocation with every payment multiplied by a constant.
#[derive(Debug, Clone, Copy)]
pub struct ScaledPaymentRule(pub f64);

impl UserRule for ScaledPaymentRule {
    fn user_outcome(
        &self,
        inst: &AuctionInstance,
        reports: &TypeProfile,
        j: usize,
    ) -> Result<(f64, f64)> {
        let (frac, x) = mechanism::user_outcome(inst, reports, j)?;
        Ok((frac, self.0 * x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct InterimEstimate {
    /// `v_j(τ_j, t_j)`.
    pub utility: EstimateWithError,
    /// `p̃_j(τ_j)`.
    pub fraction: EstimateWithError,
    /// `x̃_j(τ_j)`.
    pub payment: EstimateWithError,
}

fn check_user(inst: &AuctionInstance, j: usize) -> Result<()> {
    if j >= inst.num_users() {
        return Err(AuctionError::IndexOutOfRange {
            what: "user",
            index: j,
            len: inst.num_users(),
        });
    }
    Ok(())
}

/// Per-trial `(fraction, payment, utility)` for user `j` reporting `report`
/// with true type `true_type` while everyone else is truthful.
fn interim_samples(
    inst: &AuctionInstance,
    rule: &dyn UserRule,
    j: usize,
    report: f64,
    true_type: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<(f64, f64, f64)>> {
    check_user(inst, j)?;
    inst.distribution(j).check_in_support(report)?;
    inst.distribution(j).check_in_support(true_type)?;
    if trials == 0 {
        return Err(AuctionError::InvalidParameter(
            "trials must be at least 1".into(),
        ));
    }
    let theta = inst.theta();
    (0..trials)
        .into_par_iter()
        .map(|k| {
            let profile = draw_profile(inst.distributions(), seed, k).with_value(j, report);
            let (frac, x) = rule.user_outcome(inst, &profile, j)?;
            Ok((frac, x, theta * true_type * frac - x))
        })
        .collect()
}

/// Interim utility, allocation and payment of user `j` (0-based) reporting
/// `report` with true type `true_type`.
pub fn interim_quantities(
    inst: &AuctionInstance,
    j: usize,
    report: f64,
    true_type: f64,
    trials: usize,
    seed: u64,
) -> Result<InterimEstimate> {
    interim_quantities_with(inst, &OptimalRule, j, report, true_type, trials, seed)
}

pub fn interim_quantities_with(
    inst: &AuctionInstance,
    rule: &dyn UserRule,
    j: usize,
    report: f64,
    true_type: f64,
    trials: usize,
    seed: u64,
) -> Result<InterimEstimate> {
    let samples = interim_samples(inst, rule, j, report, true_type, trials, seed)?;
    let mut f = Moments::default();
    let mut x = Moments::default();
    let mut u = Moments::default();
    for &(a, b, c) in &samples {
        f.push(a);
        x.push(b);
        u.push(c);
    }
    Ok(InterimEstimate {
        utility: u.estimate(),
        fraction: f.estimate(),
        payment: x.estimate(),
    })
}

/// Evenly spaced points over a bounded support, or over the `[0.01, 0.99]`
/// quantile range of an unbounded one.
pub fn type_grid(dist: &TypeDistribution, points: usize) -> Vec<f64> {
    let points = points.max(1);
    let s = dist.support();
    let frac = |k: usize| {
        if points == 1 {
            0.0
        } else {
            k as f64 / (points - 1) as f64
        }
    };
    if s.is_bounded() {
        (0..points)
            .map(|k| {
                if k + 1 == points && points > 1 {
                    s.upper
                } else {
                    s.lower + s.width() * frac(k)
                }
            })
            .collect()
    } else {
        (0..points)
            .map(|k| dist.quantile(0.01 + 0.98 * frac(k)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcEntry {
    pub true_type: f64,
    pub report: f64,
    pub truthful: EstimateWithError,
    pub misreport: EstimateWithError,
    /// Paired estimate of `ṽ_j(t) - v_j(τ, t)`.
    pub margin: EstimateWithError,
    pub violated: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IcReport {
    /// 1-based user id.
    pub user: usize,
    pub sigma: f64,
    pub entries: Vec<IcEntry>,
    pub worst_margin: f64,
    pub violations: usize,
}

impl IcReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Checks truthful interim utility against every misreport on a grid, with
/// paired draws.
pub fn verify_ic(
    inst: &AuctionInstance,
    j: usize,
    type_grid_size: usize,
    report_grid_size: usize,
    trials: usize,
    seed: u64,
) -> Result<IcReport> {
    verify_ic_with(
        inst,
        &OptimalRule,
        j,
        type_grid_size,
        report_grid_size,
        trials,
        seed,
        DEFAULT_SIGMA,
    )
}

#[allow(clippy::too_many_arguments)]
pub fn verify_ic_with(
    inst: &AuctionInstance,
    rule: &dyn UserRule,
    j: usize,
    type_grid_size: usize,
    report_grid_size: usize,
    trials: usize,
    seed: u64,
    sigma: f64,
) -> Result<IcReport> {
    check_user(inst, j)?;
    if type_grid_size < 2 || report_grid_size < 2 {
        return Err(AuctionError::InvalidParameter(
            "IC grids need at least 2 points".into(),
        ));
    }
    let dist = inst.distribution(j);
    let types = type_grid(dist, type_grid_size);
    let reports = type_grid(dist, report_grid_size);
    let mut entries = Vec::with_capacity(types.len() * reports.len());
    for &t in &types {
        let truth = interim_samples(inst, rule, j, t, t, trials, seed)?;
        let truthful =
            EstimateWithError::from_samples(&truth.iter().map(|s| s.2).collect::<Vec<_>>());
        for &tau in &reports {
            let mis = interim_samples(inst, rule, j, tau, t, trials, seed)?;
            let mut diff = Moments::default();
            let mut mis_m = Moments::default();
            for (a, b) in truth.iter().zip(&mis) {
                diff.push(a.2 - b.2);
                mis_m.push(b.2);
            }
            let margin = diff.estimate();
            let violated = margin.mean < -sigma * margin.std_error - ROUNDING_TOLERANCE;
            entries.push(IcEntry {
                true_type: t,
                report: tau,
                truthful,
                misreport: mis_m.estimate(),
                margin,
                violated,
            });
        }
    }
    let worst_margin = entries
        .iter()
        .map(|e| e.margin.mean)
        .fold(f64::INFINITY, f64::min);
    let violations = entries.iter().filter(|e| e.violated).count();
    Ok(IcReport {
        user: j + 1,
        sigma,
        entries,
        worst_margin,
        violations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IrUserEntry {
    /// 1-based user id.
    pub user: usize,
    /// `(t, ṽ_j(t))` on the type grid.
    pub points: Vec<(f64, EstimateWithError)>,
    /// `ṽ_j` at the lower end of the support.
    pub endpoint: EstimateWithError,
    pub endpoint_binding: bool,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IrReport {
    pub sigma: f64,
    pub users: Vec<IrUserEntry>,
    /// Exact per-realization check `x_j <= θ t_j Σ_{i∈S_j} p_i`.
    pub audit: PropertyAudit,
}

impl IrReport {
    pub fn passed(&self) -> bool {
        self.users.iter().all(|u| u.passed && u.endpoint_binding) && self.audit.is_clean()
    }
}

/// Interim IR on a per-user type grid, the binding lower endpoint, and the
/// exact per-realization payment bound over `trials` draws.
pub fn verify_ir(
    inst: &AuctionInstance,
    type_grid_size: usize,
    trials: usize,
    seed: u64,
) -> Result<IrReport> {
    verify_ir_with(inst, type_grid_size, trials, seed, DEFAULT_SIGMA)
}

pub fn verify_ir_with(
    inst: &AuctionInstance,
    type_grid_size: usize,
    trials: usize,
    seed: u64,
    sigma: f64,
) -> Result<IrReport> {
    let mut users = Vec::with_capacity(inst.num_users());
    for j in 0..inst.num_users() {
        let dist = inst.distribution(j);
        let mut points = Vec::new();
        for t in type_grid(dist, type_grid_size) {
            let est = interim_quantities(inst, j, t, t, trials, seed)?.utility;
            points.push((t, est));
        }
        let lower = dist.lower();
        let endpoint = interim_quantities(inst, j, lower, lower, trials, seed)?.utility;
        let passed = points
            .iter()
            .all(|(_, e)| e.mean >= -sigma * e.std_error - ROUNDING_TOLERANCE);
        users.push(IrUserEntry {
            user: j + 1,
            points,
            endpoint,
            endpoint_binding: endpoint.agrees_with(0.0, sigma),
            passed,
        });
    }
    let audit = fold_trials(
        trials,
        PropertyAudit::default,
        |a, k| {
            let t = draw_profile(inst.distributions(), seed, k);
            let o = run_mechanism(inst, &t)?;
            a.record(inst, &t, &o);
            Ok(())
        },
        |a, b| a.merge(&b),
    )?;
    Ok(IrReport {
        sigma,
        users,
        audit,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MismatchMode {
    /// Estimated uniform support widened by `ε·w/2` on each side.
    UniformWiden,
    /// Estimated exponential rate `(1 + ε) λ`.
    ExponentialRateScale,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MismatchConfig {
    pub epsilon: f64,
    pub mode: MismatchMode,
}

impl MismatchConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = match self.mode {
            MismatchMode::UniformWiden => self.epsilon >= 0.0,
            MismatchMode::ExponentialRateScale => self.epsilon > -1.0,
        } && self.epsilon.is_finite();
        if ok {
            Ok(())
        } else {
            Err(AuctionError::InvalidParameter(format!(
                "epsilon {} not allowed for {:?}",
                self.epsilon, self.mode
            )))
        }
    }

    /// The distribution the auctioneer believes in when the truth is `d`.
    pub fn estimate(&self, d: &TypeDistribution) -> Result<TypeDistribution> {
        self.validate()?;
        match (self.mode, d) {
            (MismatchMode::UniformWiden, TypeDistribution::Uniform { lower, upper }) => {
                let half = self.epsilon * (upper - lower) / 2.0;
                TypeDistribution::uniform(lower - half, upper + half)
            }
            (MismatchMode::ExponentialRateScale, TypeDistribution::Exponential { rate }) => {
                TypeDistribution::exponential((1.0 + self.epsilon) * rate)
            }
            _ => Err(AuctionError::InvalidParameter(format!(
                "{:?} does not apply to {d:?}",
                self.mode
            ))),
        }
    }
}

/// Runs the mechanism built from misestimated distributions against types
/// drawn from the true ones (`inst` holds the truth). Draws outside the
/// estimated support are clamped to it. Returns the realized revenue.
pub fn simulate_mismatch(
    inst: &AuctionInstance,
    mismatch: &MismatchConfig,
    trials: usize,
    seed: u64,
) -> Result<EstimateWithError> {
    Ok(simulate_mismatch_report(inst, mismatch, trials, seed)?.er_direct)
}

pub fn simulate_mismatch_report(
    inst: &AuctionInstance,
    mismatch: &MismatchConfig,
    trials: usize,
    seed: u64,
) -> Result<SimulationReport> {
    let estimated = inst
        .distributions()
        .iter()
        .map(|d| mismatch.estimate(d))
        .collect::<Result<Vec<_>>>()?;
    let mech_inst = inst.with_distributions(estimated)?;
    let supports: Vec<_> = mech_inst
        .distributions()
        .iter()
        .map(|d| d.support())
        .collect();
    simulate_with(
        &mech_inst,
        inst.distributions(),
        |t| {
            TypeProfile::new(
                t.values()
                    .iter()
                    .zip(&supports)
                    .map(|(&v, s)| s.clamp(v))
                    .collect(),
            )
        },
        trials,
        seed,
    )
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MonotonicityReport {
    /// 1-based user id.
    pub user: usize,
    pub sigma: f64,
    /// `(τ, p̃_j(τ))` on an increasing report grid.
    pub points: Vec<(f64, EstimateWithError)>,
    /// Paired estimates of `p̃_j(τ_{k+1}) - p̃_j(τ_k)`.
    pub steps: Vec<EstimateWithError>,
    pub violations: usize,
}

impl MonotonicityReport {
    pub fn passed(&self) -> bool {
        self.violations == 0
    }
}

/// Checks that the interim cache fraction of user `j` does not decrease
/// along an increasing report grid.
pub fn verify_allocation_monotonicity(
    inst: &AuctionInstance,
    j: usize,
    grid_size: usize,
    trials: usize,
    seed: u64,
    sigma: f64,
) -> Result<MonotonicityReport> {
    check_user(inst, j)?;
    let grid = type_grid(inst.distribution(j), grid_size.max(2));
    let mut fractions = Vec::with_capacity(grid.len());
    for &tau in &grid {
        let s = interim_samples(inst, &OptimalRule, j, tau, tau, trials, seed)?;
        fractions.push(s.into_iter().map(|x| x.0).collect::<Vec<_>>());
    }
    let points = grid
        .iter()
        .zip(&fractions)
        .map(|(&tau, f)| (tau, EstimateWithError::from_samples(f)))
        .collect();
    let steps: Vec<EstimateWithError> = fractions
        .windows(2)
        .map(|w| {
            let d: Vec<f64> = w[1].iter().zip(&w[0]).map(|(b, a)| b - a).collect();
            EstimateWithError::from_samples(&d)
        })
        .collect();
    let violations = steps
        .iter()
        .filter(|e| e.mean < -sigma * e.std_error - ROUNDING_TOLERANCE)
        .count();
    Ok(MonotonicityReport {
        user: j + 1,
        sigma,
        points,
        steps,
        violations,
    })
}

/// Tolerance between closed-form and brute-force payments.
pub const ORACLE_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OracleReport {
    pub profiles: usize,
    pub comparisons: usize,
    pub max_abs_diff: f64,
    /// Comparisons differing by more than the tolerance.
    pub failures: usize,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures == 0
    }
}

/// Compares every user's closed-form payment with the brute-force sweep on
/// `profiles` random truthful profiles.
pub fn verify_oracle(
    inst: &AuctionInstance,
    profiles: usize,
    seed: u64,
    grid_points: usize,
    tolerance: f64,
) -> Result<OracleReport> {
    let diffs = (0..profiles)
        .into_par_iter()
        .map(|k| {
            let t = draw_profile(inst.distributions(), seed, k);
            let o = run_mechanism(inst, &t)?;
            (0..inst.num_users())
                .map(|j| {
                    let brute = mechanism::payment_oracle(inst, &t, j, grid_points)?;
                    Ok((o.payments[j] - brute).abs())
                })
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<f64> = diffs.into_iter().flatten().collect();
    Ok(OracleReport {
        profiles,
        comparisons: all.len(),
        max_abs_diff: all.iter().copied().fold(0.0, f64::max),
        failures: all.iter().filter(|d| d.is_nan() || **d > tolerance).count(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{CostFunction, InterestStructure};

    fn small_instance() -> AuctionInstance {
        let interests = InterestStructure::new(3, vec![vec![0, 1], vec![1, 2]]).unwrap();
        AuctionInstance::new(
            interests,
            vec![1.0, 0.5],
            CostFunction::quadratic(0.1).unwrap(),
            1.0,
            vec![
                TypeDistribution::uniform(1.0, 4.0).unwrap(),
                TypeDistribution::uniform(1.5, 3.0).unwrap(),
                TypeDistribution::exponential(0.5).unwrap(),
            ],
        )
        .unwrap()
    }

    #[test]
    fn moments_match_two_pass_formulas() {
        let xs: Vec<f64> = (0..1000)
            .map(|k| ((k * 37) % 101) as f64 * 0.13 + 1e4)
            .collect();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (xs.len() - 1) as f64;
        let e = EstimateWithError::from_samples(&xs);
        assert!((e.mean - mean).abs() < 1e-9);
        assert!((e.std_error - (var / 1000.0).sqrt()).abs() < 1e-9);

        let mut a = Moments::default();
        let mut b = Moments::default();
        xs[..300].iter().for_each(|&x| a.push(x));
        xs[300..].iter().for_each(|&x| b.push(x));
        a.merge(&b);
        assert!((a.estimate().mean - mean).abs() < 1e-9);
        assert!((a.estimate().std_error - e.std_error).abs() < 1e-9);
    }

    #[test]
    fn single_trial_has_zero_std_error() {
        let e = EstimateWithError::from_samples(&[3.0]);
        assert_eq!(e.std_error, 0.0);
        assert_eq!(e.trials, 1);
    }

    #[test]
    fn simulation_is_deterministic_and_thread_independent() {
        let inst = small_instance();
        let a = simulate(&inst, 700, 5).unwrap();
        let b = simulate(&inst, 700, 5).unwrap();
        assert_eq!(a, b);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let c = pool.install(|| simulate(&inst, 700, 5).unwrap());
        assert_eq!(a, c);
        assert!(a.audit.is_clean());
    }

    #[test]
    fn huge_prices_mean_no_caching() {
        let inst = small_instance().with_prices(vec![1e6, 1e6]).unwrap();
        let r = simulate(&inst, 500, 1).unwrap();
        assert_eq!(r.er_direct.mean, 0.0);
        assert_eq!(r.er_virtual.mean, 0.0);
        assert!(r.expected_allocation.iter().all(|e| e.mean == 0.0));
        assert_eq!(r.idle_fraction.mean, 1.0);
    }

    #[test]
    fn interim_rejects_out_of_support_report() {
        let inst = small_instance();
        assert!(interim_quantities(&inst, 0, 5.0, 2.0, 10, 0).is_err());
        assert!(interim_quantities(&inst, 2, -1.0, 2.0, 10, 0).is_err());
    }

    #[test]
    fn ic_diagonal_margin_is_exactly_zero() {
        let inst = small_instance();
        let r = verify_ic(&inst, 1, 3, 3, 300, 9).unwrap();
        for e in r.entries.iter().filter(|e| e.true_type == e.report) {
            assert_eq!(e.margin.mean, 0.0);
            assert_eq!(e.margin.std_error, 0.0);
        }
        assert!(r.passed());
    }

    #[test]
    fn type_grid_shapes() {
        let u = TypeDistribution::uniform(1.0, 4.0).unwrap();
        assert_eq!(type_grid(&u, 4), vec![1.0, 2.0, 3.0, 4.0]);
        let e = TypeDistribution::exponential(1.0).unwrap();
        let g = type_grid(&e, 3);
        assert!((g[0] - e.quantile(0.01)).abs() < 1e-15);
        assert!((g[2] - e.quantile(0.99)).abs() < 1e-12);
    }

    #[test]
    fn mismatch_estimates() {
        let d = TypeDistribution::uniform(1.0, 4.0).unwrap();
        let m = MismatchConfig {
            epsilon: 0.5,
            mode: MismatchMode::UniformWiden,
        };
        assert_eq!(
            m.estimate(&d).unwrap(),
            TypeDistribution::Uniform {
                lower: 0.25,
                upper: 4.75
            }
        );
        let neg = MismatchConfig {
            epsilon: -0.1,
            mode: MismatchMode::UniformWiden,
        };
        assert!(neg.estimate(&d).is_err());
        let e = TypeDistribution::exponential(0.1).unwrap();
        let m = MismatchConfig {
            epsilon: -0.5,
            mode: MismatchMode::ExponentialRateScale,
        };
        assert_eq!(
            m.estimate(&e).unwrap(),
            TypeDistribution::Exponential { rate: 0.05 }
        );
        assert!(m.estimate(&d).is_err());
        let bad = MismatchConfig {
            epsilon: -1.0,
            mode: MismatchMode::ExponentialRateScale,
        };
        assert!(bad.estimate(&e).is_err());
    }
}
