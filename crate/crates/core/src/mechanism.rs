//! The revenue-optimal caching auction.
//!
//! Allocation: every content is scored by its virtual social welfare
//! `Σ_{j∈Ω_i} (θ c_j(t_j) - h(θ)) - r_i`; the whole cache goes to the best
//! content if its score is positive, otherwise nothing is cached.
//!
//! Payments: `x_j = θ t_j P_j(t) - θ ∫_{a_j}^{t_j} P_j(τ, t_{-j}) dτ`, where
//! `P_j` is the cache fraction of contents user `j` wants. Because `P_j` is a
//! 0/1 step in `τ`, the integral has the closed form computed by
//! [`payment_closed_form`]; [`payment_oracle`] evaluates it by brute force.

use serde::Serialize;

use crate::distributions::TypeProfile;
use crate::error::{AuctionError, Result};
use crate::model::AuctionInstance;

/// Width below which the oracle stops bisecting the step location.
pub const ORACLE_JUMP_TOLERANCE: f64 = 1e-10;

/// Relative slack allowed for rounding when the threshold `ξ_j` lands a hair
/// outside `[a_j, t_j]`. Anything larger is an internal inconsistency.
const XI_SLACK: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Allocation {
    pub fractions: Vec<f64>,
    /// 0-based content index receiving the whole cache.
    pub winner: Option<usize>,
}

impl Allocation {
    pub fn empty(num_contents: usize) -> Self {
        Allocation {
            fractions: vec![0.0; num_contents],
            winner: None,
        }
    }

    pub fn single(num_contents: usize, winner: usize) -> Self {
        let mut fractions = vec![0.0; num_contents];
        fractions[winner] = 1.0;
        Allocation {
            fractions,
            winner: Some(winner),
        }
    }

    pub fn total(&self) -> f64 {
        self.fractions.iter().sum()
    }

    /// `Σ_{i∈S_j} p_i`.
    pub fn user_fraction(&self, inst: &AuctionInstance, user: usize) -> f64 {
        match self.winner {
            Some(k) if inst.interests().is_interested(user, k) => 1.0,
            _ => 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    /// `φ_j(a_j) >= β_j`: user `j`'s content wins on the whole of `[a_j, t_j]`.
    Full,
    /// `φ_j(t_j) < β_j`: it never wins.
    Zero,
    /// It wins from `ξ_j` up to `t_j`.
    Threshold,
}

/// The quantities that collapse the payment integral to a closed form.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PaymentCertificate {
    /// 0-based user index.
    pub user: usize,
    pub beta: f64,
    /// `None` when the user wants no content.
    pub phi_at_lower: Option<f64>,
    pub phi_at_t: Option<f64>,
    pub xi: Option<f64>,
    pub branch: Branch,
    pub integral_value: f64,
    pub payment: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MechanismOutcome {
    pub allocation: Allocation,
    pub payments: Vec<f64>,
    pub certificates: Vec<PaymentCertificate>,
    /// `max(0, max_i score_i)`.
    pub virtual_surplus: f64,
    /// Payments minus acquisition and delivery costs.
    pub realized_sp_profit: f64,
}

impl MechanismOutcome {
    pub fn user_fraction(&self, inst: &AuctionInstance, user: usize) -> f64 {
        self.allocation.user_fraction(inst, user)
    }
}

fn check_profile(inst: &AuctionInstance, t: &TypeProfile) -> Result<()> {
    if t.len() != inst.num_users() {
        return Err(AuctionError::DimensionMismatch(format!(
            "profile has {} entries for {} users",
            t.len(),
            inst.num_users()
        )));
    }
    Ok(())
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

/// Per-user welfare terms `θ c_j(t_j) - h(θ)`.
fn welfare_terms(inst: &AuctionInstance, t: &TypeProfile) -> Result<Vec<f64>> {
    check_profile(inst, t)?;
    let theta = inst.theta();
    let h = inst.delivery_cost();
    inst.distributions()
        .iter()
        .zip(t.values())
        .map(|(d, &tj)| Ok(theta * d.virtual_valuation(tj)? - h))
        .collect()
}

fn scores_from_terms(inst: &AuctionInstance, terms: &[f64]) -> Vec<f64> {
    (0..inst.num_contents())
        .map(|i| {
            inst.interests()
                .users_of(i)
                .iter()
                .map(|&s| terms[s])
                .sum::<f64>()
                - inst.prices()[i]
        })
        .collect()
}

/// Highest-scoring content (lowest index on ties) if its score is positive.
fn allocation_from_scores(scores: &[f64]) -> Allocation {
    let mut best: Option<(usize, f64)> = None;
    for (i, &s) in scores.iter().enumerate() {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((i, s));
        }
    }
    match best {
        Some((k, s)) if s > 0.0 => Allocation::single(scores.len(), k),
        _ => Allocation::empty(scores.len()),
    }
}

/// Virtual social welfare of caching content `i` (0-based).
pub fn content_score(inst: &AuctionInstance, t: &TypeProfile, i: usize) -> Result<f64> {
    if i >= inst.num_contents() {
        return Err(AuctionError::IndexOutOfRange {
            what: "content",
            index: i,
            len: inst.num_contents(),
        });
    }
    let terms = welfare_terms(inst, t)?;
    Ok(inst
        .interests()
        .users_of(i)
        .iter()
        .map(|&s| terms[s])
        .sum::<f64>()
        - inst.prices()[i])
}

/// All content scores at once.
pub fn content_scores(inst: &AuctionInstance, t: &TypeProfile) -> Result<Vec<f64>> {
    let terms = welfare_terms(inst, t)?;
    Ok(scores_from_terms(inst, &terms))
}

/// Winner-take-all allocation.
pub fn allocate(inst: &AuctionInstance, t: &TypeProfile) -> Result<Allocation> {
    let terms = welfare_terms(inst, t)?;
    Ok(allocation_from_scores(&scores_from_terms(inst, &terms)))
}

/// Precomputed per-profile quantities shared by every user's payment.
struct ProfileState {
    terms: Vec<f64>,
    scores: Vec<f64>,
    allocation: Allocation,
}

impl ProfileState {
    fn new(inst: &AuctionInstance, t: &TypeProfile) -> Result<Self> {
        let terms = welfare_terms(inst, t)?;
        let scores = scores_from_terms(inst, &terms);
        let allocation = allocation_from_scores(&scores);
        Ok(ProfileState {
            terms,
            scores,
            allocation,
        })
    }
}

/// Payment of user `j` (0-based) with its certificate.
pub fn payment_closed_form(
    inst: &AuctionInstance,
    t: &TypeProfile,
    j: usize,
) -> Result<PaymentCertificate> {
    check_user(inst, j)?;
    let state = ProfileState::new(inst, t)?;
    certificate_for(inst, t, &state, j)
}

fn certificate_for(
    inst: &AuctionInstance,
    t: &TypeProfile,
    state: &ProfileState,
    j: usize,
) -> Result<PaymentCertificate> {
    let interests = inst.interests();
    let wanted = interests.contents_of(j);

    // β_j: best score among contents j does not want, floored at 0.
    let beta = (0..inst.num_contents())
        .filter(|&i| !interests.is_interested(j, i))
        .map(|i| state.scores[i])
        .fold(0.0_f64, f64::max);

    if wanted.is_empty() {
        return Ok(PaymentCertificate {
            user: j,
            beta,
            phi_at_lower: None,
            phi_at_t: None,
            xi: None,
            branch: Branch::Zero,
            integral_value: 0.0,
            payment: 0.0,
        });
    }

    // Best score within S_j with user j's own term left out.
    let others_best = wanted
        .iter()
        .map(|&i| {
            interests
                .users_of(i)
                .iter()
                .filter(|&&s| s != j)
                .map(|&s| state.terms[s])
                .sum::<f64>()
                - inst.prices()[i]
        })
        .fold(f64::NEG_INFINITY, f64::max);

    let theta = inst.theta();
    let h = inst.delivery_cost();
    let dist = inst.distribution(j);
    let lower = dist.lower();
    let tj = t.get(j);

    let c_lower = match dist.virtual_valuation(lower) {
        Ok(c) => c,
        Err(AuctionError::ZeroDensity(_)) => f64::NEG_INFINITY,
        Err(e) => return Err(e),
    };
    let phi_lower = theta * c_lower - h + others_best;
    let phi_t = state.terms[j] + others_best;

    let (branch, xi, integral_value) = if phi_lower >= beta {
        (Branch::Full, None, tj - lower)
    } else if phi_t < beta {
        (Branch::Zero, None, 0.0)
    } else {
        let target = (beta + h - others_best) / theta;
        let xi = dist.inverse_virtual_valuation(target).map_err(|e| {
            AuctionError::Internal(format!("threshold for user {} not invertible: {e}", j + 1))
        })?;
        let slack = XI_SLACK * tj.abs().max(1.0);
        if xi < lower - slack || xi > tj + slack {
            return Err(AuctionError::Internal(format!(
                "threshold {xi} for user {} outside [{lower}, {tj}]",
                j + 1
            )));
        }
        let xi = xi.clamp(lower, tj);
        (Branch::Threshold, Some(xi), tj - xi)
    };

    let fraction = state.allocation.user_fraction(inst, j);
    let payment = theta * tj * fraction - theta * integral_value;
    Ok(PaymentCertificate {
        user: j,
        beta,
        phi_at_lower: Some(phi_lower),
        phi_at_t: Some(phi_t),
        xi,
        branch,
        integral_value,
        payment,
    })
}

/// Brute-force payment: sweeps user `j`'s report over `[a_j, t_j]`, reruns the
/// allocation at each grid point, integrates the 0/1 step by trapezoid and
/// bisects the jump cell. Independent of the β/φ/ξ machinery.
pub fn payment_oracle(
    inst: &AuctionInstance,
    t: &TypeProfile,
    j: usize,
    grid_points: usize,
) -> Result<f64> {
    check_user(inst, j)?;
    check_profile(inst, t)?;
    if grid_points < 2 {
        return Err(AuctionError::InvalidParameter(
            "oracle grid needs at least 2 points".into(),
        ));
    }
    let theta = inst.theta();
    let lower = inst.distribution(j).lower();
    let tj = t.get(j);
    let step_at = |tau: f64| -> Result<f64> {
        let alloc = allocate(inst, &t.with_value(j, tau))?;
        Ok(alloc.user_fraction(inst, j))
    };

    let fraction_at_t = step_at(tj)?;
    if tj <= lower || inst.interests().contents_of(j).is_empty() {
        return Ok(theta * tj * fraction_at_t);
    }

    let grid: Vec<f64> = (0..grid_points)
        .map(|k| {
            if k + 1 == grid_points {
                tj
            } else {
                lower + (tj - lower) * k as f64 / (grid_points - 1) as f64
            }
        })
        .collect();
    let values = grid
        .iter()
        .map(|&tau| step_at(tau))
        .collect::<Result<Vec<f64>>>()?;

    let mut integral = 0.0;
    for k in 1..grid.len() {
        let (a, b) = (grid[k - 1], grid[k]);
        let (ga, gb) = (values[k - 1], values[k]);
        if ga > gb {
            return Err(AuctionError::Internal(format!(
                "allocation of user {} drops from {ga} to {gb} between reports {a} and {b}",
                j + 1
            )));
        }
        if ga == gb {
            integral += 0.5 * (ga + gb) * (b - a);
        } else {
            let (mut lo, mut hi) = (a, b);
            while hi - lo > ORACLE_JUMP_TOLERANCE {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                if step_at(mid)? > ga {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            let jump = 0.5 * (lo + hi);
            integral += ga * (jump - a) + gb * (b - jump);
        }
    }
    Ok(theta * tj * fraction_at_t - theta * integral)
}

/// Allocation, every payment with its certificate, and the realized profit.
pub fn run_mechanism(inst: &AuctionInstance, reports: &TypeProfile) -> Result<MechanismOutcome> {
    let state = ProfileState::new(inst, reports)?;
    let certificates = (0..inst.num_users())
        .map(|j| certificate_for(inst, reports, &state, j))
        .collect::<Result<Vec<_>>>()?;
    let payments: Vec<f64> = certificates.iter().map(|c| c.payment).collect();
    let realized_sp_profit = realized_profit(inst, &state.allocation, &payments);
    let virtual_surplus = state.scores.iter().copied().fold(0.0_f64, f64::max);
    Ok(MechanismOutcome {
        allocation: state.allocation,
        payments,
        certificates,
        virtual_surplus,
        realized_sp_profit,
    })
}

/// `Σ_j x_j - Σ_i p_i r_i - Σ_i p_i |Ω_i| h(θ)`.
pub fn realized_profit(inst: &AuctionInstance, allocation: &Allocation, payments: &[f64]) -> f64 {
    let h = inst.delivery_cost();
    let costs: f64 = allocation
        .fractions
        .iter()
        .enumerate()
        .map(|(i, p)| p * inst.prices()[i] + p * inst.interests().users_of(i).len() as f64 * h)
        .sum();
    payments.iter().sum::<f64>() - costs
}

/// `(Σ_{i∈S_j} p_i) θ t_j - x_j` evaluated at the true type.
pub fn ex_post_utility(
    inst: &AuctionInstance,
    outcome: &MechanismOutcome,
    t_true: &TypeProfile,
    j: usize,
) -> f64 {
    outcome.user_fraction(inst, j) * inst.theta() * t_true.get(j) - outcome.payments[j]
}

/// Cache fraction and payment of a single user, skipping everyone else's
/// payment. Used by the interim estimators.
pub fn user_outcome(inst: &AuctionInstance, reports: &TypeProfile, j: usize) -> Result<(f64, f64)> {
    check_user(inst, j)?;
    let state = ProfileState::new(inst, reports)?;
    let cert = certificate_for(inst, reports, &state, j)?;
    Ok((state.allocation.user_fraction(inst, j), cert.payment))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::TypeDistribution;
    use crate::model::{CostFunction, InterestStructure};

    fn section4_uniform() -> AuctionInstance {
        let interests = InterestStructure::from_one_based(
            10,
            &[
                vec![1, 3, 4, 5, 6, 10],
                vec![1, 3, 5, 7, 8, 9],
                vec![1, 2, 3, 5, 9, 10],
            ],
        )
        .unwrap();
        let dists = (0..10)
            .map(|j| TypeDistribution::uniform(1.0 + 0.1 * j as f64, 4.0 + 0.1 * j as f64).unwrap())
            .collect();
        AuctionInstance::new(
            interests,
            vec![4.2036, 1.2714, 4.0714],
            CostFunction::quadratic(0.1).unwrap(),
            1.0,
            dists,
        )
        .unwrap()
    }

    #[test]
    fn empty_interest_set_scores_minus_price() {
        let interests = InterestStructure::new(2, vec![vec![], vec![0, 1]]).unwrap();
        let inst = AuctionInstance::new(
            interests,
            vec![4.0714, 1.0],
            CostFunction::quadratic(0.1).unwrap(),
            1.0,
            vec![TypeDistribution::uniform(1.0, 4.0).unwrap(); 2],
        )
        .unwrap();
        let t = TypeProfile::new(vec![2.0, 3.0]);
        assert_eq!(content_score(&inst, &t, 0).unwrap(), -4.0714);
    }

    #[test]
    fn single_user_score() {
        let interests = InterestStructure::new(1, vec![vec![0]]).unwrap();
        let inst = AuctionInstance::new(
            interests,
            vec![1.0],
            CostFunction::quadratic(0.1).unwrap(),
            1.0,
            vec![TypeDistribution::uniform(1.0, 4.0).unwrap()],
        )
        .unwrap();
        let s = content_score(&inst, &TypeProfile::new(vec![4.0]), 0).unwrap();
        assert!((s - 2.9).abs() < 1e-12);
    }

    #[test]
    fn lower_endpoints_give_negative_scores() {
        let inst = section4_uniform();
        let t = TypeProfile::new((0..10).map(|j| 1.0 + 0.1 * j as f64).collect());
        let scores = content_scores(&inst, &t).unwrap();
        assert!(scores.iter().all(|&s| s < 0.0), "{scores:?}");
        let outcome = run_mechanism(&inst, &t).unwrap();
        assert_eq!(outcome.allocation.winner, None);
        assert!(outcome.payments.iter().all(|&x| x == 0.0));
        assert_eq!(outcome.realized_sp_profit, 0.0);
        assert_eq!(outcome.virtual_surplus, 0.0);
    }

    #[test]
    fn content_two_wins_when_its_users_report_high() {
        let inst = section4_uniform();
        // users of content 2 (1-based 1,3,5,7,8,9) at their upper ends, rest at lower ends
        let high = [0usize, 2, 4, 6, 7, 8];
        let t = TypeProfile::new(
            (0..10)
                .map(|j| {
                    if high.contains(&j) {
                        4.0 + 0.1 * j as f64
                    } else {
                        1.0 + 0.1 * j as f64
                    }
                })
                .collect(),
        );
        let alloc = allocate(&inst, &t).unwrap();
        assert_eq!(alloc.winner, Some(1));
        assert_eq!(alloc.fractions, vec![0.0, 1.0, 0.0]);
        let outcome = run_mechanism(&inst, &t).unwrap();
        for j in 0..10 {
            if !inst.interests().users_of(1).contains(&j) {
                assert_eq!(outcome.payments[j], 0.0);
            } else {
                assert!(outcome.payments[j] > 0.0);
            }
        }
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let interests = InterestStructure::new(2, vec![vec![0, 1], vec![0, 1]]).unwrap();
        let inst = AuctionInstance::new(
            interests,
            vec![1.0, 1.0],
            CostFunction::quadratic(0.1).unwrap(),
            1.0,
            vec![TypeDistribution::uniform(1.0, 4.0).unwrap(); 2],
        )
        .unwrap();
        let t = TypeProfile::new(vec![3.5, 3.0]);
        let scores = content_scores(&inst, &t).unwrap();
        assert_eq!(scores[0], scores[1]);
        assert!(scores[0] > 0.0);
        assert_eq!(allocate(&inst, &t).unwrap().winner, Some(0));
    }

    #[test]
    fn user_without_interests_pays_nothing() {
        let interests = InterestStructure::new(2, vec![vec![0]]).unwrap();
        let inst = AuctionInstance::new(
            interests,
            vec![0.5],
            CostFunction::quadratic(0.1).unwrap(),
            1.0,
            vec![TypeDistribution::uniform(1.0, 4.0).unwrap(); 2],
        )
        .unwrap();
        let t = TypeProfile::new(vec![3.0, 3.9]);
        let cert = payment_closed_form(&inst, &t, 1).unwrap();
        assert_eq!(cert.payment, 0.0);
        assert_eq!(cert.integral_value, 0.0);
        assert_eq!(cert.branch, Branch::Zero);
        assert_eq!(payment_oracle(&inst, &t, 1, 100).unwrap(), 0.0);
    }

    #[test]
    fn oracle_full_step_gives_reserve_like_payment() {
        // A single user, content free and cheap to deliver: wins for every report.
        let interests = InterestStructure::new(1, vec![vec![0]]).unwrap();
        let inst = AuctionInstance::new(
            interests,
            vec![0.0],
            CostFunction::quadratic(0.01).unwrap(),
            2.0,
            vec![TypeDistribution::uniform(3.0, 4.0).unwrap()],
        )
        .unwrap();
        let t = TypeProfile::new(vec![3.7]);
        let x = payment_oracle(&inst, &t, 0, 200).unwrap();
        assert!((x - 2.0 * 3.0).abs() < 1e-12);
        let cert = payment_closed_form(&inst, &t, 0).unwrap();
        assert_eq!(cert.branch, Branch::Full);
        assert!((cert.payment - 6.0).abs() < 1e-12);
    }

    #[test]
    fn oracle_zero_step_gives_zero() {
        let interests = InterestStructure::new(1, vec![vec![0]]).unwrap();
        let inst = AuctionInstance::new(
            interests,
            vec![100.0],
            CostFunction::quadratic(0.1).unwrap(),
            1.0,
            vec![TypeDistribution::uniform(1.0, 4.0).unwrap()],
        )
        .unwrap();
        let t = TypeProfile::new(vec![3.0]);
        assert_eq!(payment_oracle(&inst, &t, 0, 100).unwrap(), 0.0);
        assert_eq!(payment_closed_form(&inst, &t, 0).unwrap().payment, 0.0);
    }

    #[test]
    fn profile_length_checked() {
        let inst = section4_uniform();
        assert!(allocate(&inst, &TypeProfile::new(vec![2.0; 9])).is_err());
        assert!(content_score(&inst, &TypeProfile::new(vec![2.0; 10]), 3).is_err());
        assert!(payment_closed_form(&inst, &TypeProfile::new(vec![2.0; 10]), 10).is_err());
    }

    #[test]
    fn realized_profit_matches_cost_accounting() {
        let inst = section4_uniform();
        let t = TypeProfile::new((0..10).map(|j| 3.5 + 0.1 * j as f64).collect());
        let o = run_mechanism(&inst, &t).unwrap();
        let k = o.allocation.winner.unwrap();
        let expected = o.payments.iter().sum::<f64>()
            - inst.prices()[k]
            - inst.interests().users_of(k).len() as f64 * inst.delivery_cost();
        assert_eq!(o.realized_sp_profit, expected);
    }
}
