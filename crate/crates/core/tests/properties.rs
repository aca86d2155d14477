use cache_auction::mechanism::{allocate, payment_closed_form, payment_oracle, run_mechanism};
use cache_auction::{
    AuctionInstance, Branch, CostFunction, InterestStructure, TypeDistribution, TypeProfile,
};
use proptest::prelude::*;

#[derive(Debug, Clone)]
enum Law {
    Uniform(f64, f64),
    Exponential(f64),
}

fn law() -> impl Strategy<Value = Law> {
    prop_oneof![
        (0.0..3.0f64, 0.5..4.0f64).prop_map(|(l, w)| Law::Uniform(l, l + w)),
        (0.1..2.0f64).prop_map(Law::Exponential),
    ]
}

/// A random market with a profile drawn through quantiles in (0.001, 0.999).
fn market() -> impl Strategy<Value = (AuctionInstance, TypeProfile)> {
    (1usize..5, 1usize..7).prop_flat_map(|(m, n)| {
        (
            prop::collection::vec(prop::collection::vec(any::<bool>(), n), m),
            prop::collection::vec(0.0..6.0f64, m),
            0.01..1.0f64,
            0.2..3.0f64,
            prop::collection::vec(law(), n),
            prop::collection::vec(0.001..0.999f64, n),
        )
            .prop_map(move |(member, prices, alpha, theta, laws, quantiles)| {
                let sets = member
                    .iter()
                    .map(|row| (0..n).filter(|&j| row[j]).collect())
                    .collect();
                let dists: Vec<TypeDistribution> = laws
                    .iter()
                    .map(|l| match *l {
                        Law::Uniform(a, b) => TypeDistribution::uniform(a, b).unwrap(),
                        Law::Exponential(r) => TypeDistribution::exponential(r).unwrap(),
                    })
                    .collect();
                let t = TypeProfile::new(
                    dists
                        .iter()
                        .zip(&quantiles)
                        .map(|(d, &u)| d.quantile(u))
                        .collect(),
                );
                let inst = AuctionInstance::new(
                    InterestStructure::new(n, sets).unwrap(),
                    prices,
                    CostFunction::quadratic(alpha).unwrap(),
                    theta,
                    dists,
                )
                .unwrap();
                (inst, t)
            })
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn allocation_is_feasible((inst, t) in market()) {
        let a = allocate(&inst, &t).unwrap();
        prop_assert!(a.fractions.iter().all(|&p| p == 0.0 || p == 1.0));
        prop_assert!(a.total() <= 1.0);
        prop_assert_eq!(a.winner.is_some(), a.total() == 1.0);
    }

    #[test]
    fn raising_a_report_never_lowers_the_fraction((inst, t) in market(), j in 0usize..6, bump in 0.0..3.0f64) {
        let j = j % inst.num_users();
        let raised = t.with_value(j, inst.distribution(j).support().clamp(t.get(j) + bump));
        let before = allocate(&inst, &t).unwrap().user_fraction(&inst, j);
        let after = allocate(&inst, &raised).unwrap().user_fraction(&inst, j);
        prop_assert!(after >= before);
    }

    #[test]
    fn payments_vanish_without_cached_content((inst, t) in market()) {
        let o = run_mechanism(&inst, &t).unwrap();
        for j in 0..inst.num_users() {
            if o.user_fraction(&inst, j) == 0.0 {
                prop_assert_eq!(o.payments[j], 0.0);
            }
        }
    }

    #[test]
    fn payments_are_bounded_by_value((inst, t) in market()) {
        let o = run_mechanism(&inst, &t).unwrap();
        for j in 0..inst.num_users() {
            let x = o.payments[j];
            prop_assert!(x <= inst.theta() * t.get(j) * o.user_fraction(&inst, j));
            prop_assert!(x >= -1e-12);
        }
    }

    #[test]
    fn certificates_match_their_branch((inst, t) in market()) {
        for j in 0..inst.num_users() {
            let c = payment_closed_form(&inst, &t, j).unwrap();
            let lower = inst.distribution(j).lower();
            match c.branch {
                Branch::Full => prop_assert!(c.phi_at_lower.unwrap() >= c.beta),
                Branch::Zero => {
                    if let Some(phi_t) = c.phi_at_t {
                        prop_assert!(phi_t < c.beta);
                    }
                    prop_assert_eq!(c.payment, 0.0);
                }
                Branch::Threshold => {
                    prop_assert!(c.phi_at_lower.unwrap() < c.beta);
                    prop_assert!(c.phi_at_t.unwrap() >= c.beta);
                    let xi = c.xi.unwrap();
                    prop_assert!(xi >= lower && xi <= t.get(j), "xi {} outside [{}, {}]", xi, lower, t.get(j));
                }
            }
            prop_assert!(c.beta >= 0.0);
        }
    }

    #[test]
    fn closed_form_matches_oracle((inst, t) in market()) {
        let o = run_mechanism(&inst, &t).unwrap();
        for j in 0..inst.num_users() {
            let brute = payment_oracle(&inst, &t, j, 32).unwrap();
            prop_assert!((brute - o.payments[j]).abs() <= 1e-6, "user {}: {} vs {}", j, o.payments[j], brute);
        }
    }

    #[test]
    fn revenue_accounting_identity((inst, t) in market()) {
        let o = run_mechanism(&inst, &t).unwrap();
        let paid: f64 = o.payments.iter().sum();
        let cost: f64 = (0..inst.num_contents())
            .map(|i| o.allocation.fractions[i]
                * (inst.prices()[i] + inst.interests().users_of(i).len() as f64 * inst.delivery_cost()))
            .sum();
        prop_assert!((o.realized_sp_profit - (paid - cost)).abs() <= 1e-9);
        prop_assert!(o.virtual_surplus >= 0.0);
    }

    #[test]
    fn virtual_valuation_inverse_round_trips(l in law(), u in 0.001..0.999f64) {
        let d = match l {
            Law::Uniform(a, b) => TypeDistribution::uniform(a, b).unwrap(),
            Law::Exponential(r) => TypeDistribution::exponential(r).unwrap(),
        };
        let t = d.quantile(u);
        let z = d.virtual_valuation(t).unwrap();
        let back = d.inverse_virtual_valuation(z).unwrap();
        prop_assert!((back - t).abs() <= 1e-9 * (1.0 + t.abs()), "{} -> {} -> {}", t, z, back);
        prop_assert!((d.virtual_valuation(back).unwrap() - z).abs() <= 1e-9 * (1.0 + z.abs()));
    }

    #[test]
    fn marginal_cost_inverse_round_trips(alpha in 0.01..5.0f64, d in 1.2..4.0f64, y in 1e-3..1e3f64) {
        for cost in [
            CostFunction::quadratic(alpha).unwrap(),
            CostFunction::Power { alpha, exponent: d },
            CostFunction::Polynomial { coefficients: vec![0.0, 0.0, alpha, 0.1] },
        ] {
            let theta = cost.inverse_derivative(y).unwrap();
            prop_assert!(theta > 0.0);
            prop_assert!((cost.derivative(theta) - y).abs() <= 1e-9 * y.max(1.0), "{:?}", cost);
        }
    }
}
