//! Delivery-quality selection.

use serde::Serialize;

use crate::distributions::TypeProfile;
use crate::error::{AuctionError, Result};
use crate::mechanism::run_mechanism;
use crate::model::{AuctionInstance, CostFunction};
use crate::simulation::{draw_profile, fold_trials, EstimateWithError, Moments};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum QualityMethod {
    ClosedForm,
    NumericSweep,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub theta: f64,
    pub er: EstimateWithError,
    pub avg_user_utility: EstimateWithError,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QualityResult {
    pub theta_star: f64,
    pub method: QualityMethod,
    pub er_at_star: Option<EstimateWithError>,
    /// Sorted by θ.
    pub curve: Option<Vec<CurvePoint>>,
}

/// Large-market optimal quality `(h')⁻¹(lower)` for users sharing the lower
/// support bound `lower`.
pub fn optimal_theta_closed_form(cost: &CostFunction, lower: f64) -> Result<f64> {
    if !lower.is_finite() || lower <= 0.0 {
        return Err(AuctionError::InvalidParameter(format!(
            "common lower support bound must be positive, got {lower}"
        )));
    }
    cost.validate()?;
    cost.inverse_derivative(lower)
}

impl QualityResult {
    /// Wraps [`optimal_theta_closed_form`] without a curve.
    pub fn closed_form(cost: &CostFunction, lower: f64) -> Result<Self> {
        Ok(QualityResult {
            theta_star: optimal_theta_closed_form(cost, lower)?,
            method: QualityMethod::ClosedForm,
            er_at_star: None,
            curve: None,
        })
    }
}

/// Expected-revenue curve over `grid`, estimated with the virtual-surplus
/// form. Every θ sees the same type draws. Ties in the argmax go to the
/// smaller θ.
pub fn er_curve(
    template: &AuctionInstance,
    grid: &[f64],
    trials: usize,
    seed: u64,
) -> Result<QualityResult> {
    if grid.is_empty() {
        return Err(AuctionError::InvalidParameter("theta grid is empty".into()));
    }
    if trials == 0 {
        return Err(AuctionError::InvalidParameter(
            "trials must be at least 1".into(),
        ));
    }
    let mut thetas = grid.to_vec();
    thetas.sort_by(f64::total_cmp);

    let table: Vec<TypeProfile> = (0..trials)
        .map(|k| draw_profile(template.distributions(), seed, k))
        .collect();
    let n = template.num_users() as f64;

    let mut curve = Vec::with_capacity(thetas.len());
    for &theta in &thetas {
        let inst = template.with_theta(theta)?;
        let (er, util) = fold_trials(
            trials,
            || (Moments::default(), Moments::default()),
            |acc, k| {
                let t = &table[k];
                let o = run_mechanism(&inst, t)?;
                acc.0.push(o.virtual_surplus);
                let total: f64 = (0..inst.num_users())
                    .map(|j| o.user_fraction(&inst, j) * theta * t.get(j) - o.payments[j])
                    .sum();
                acc.1.push(if n > 0.0 { total / n } else { 0.0 });
                Ok(())
            },
            |a, b| {
                a.0.merge(&b.0);
                a.1.merge(&b.1);
            },
        )?;
        curve.push(CurvePoint {
            theta,
            er: er.estimate(),
            avg_user_utility: util.estimate(),
        });
    }

    let best = curve.iter().enumerate().fold(0, |best, (k, p)| {
        if p.er.mean > curve[best].er.mean {
            k
        } else {
            best
        }
    });
    Ok(QualityResult {
        theta_star: curve[best].theta,
        method: QualityMethod::NumericSweep,
        er_at_star: Some(curve[best].er),
        curve: Some(curve),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::TypeDistribution;
    use crate::model::{sample_interest_structure, PopularityModel};

    fn homogeneous(n: usize, theta: f64) -> AuctionInstance {
        let interests = sample_interest_structure(
            &PopularityModel {
                q: vec![0.7, 0.5, 0.4],
                seed: 11,
            },
            n,
        )
        .unwrap();
        AuctionInstance::new(
            interests,
            vec![4.2036, 1.2714, 4.0714],
            CostFunction::quadratic(0.1).unwrap(),
            theta,
            vec![TypeDistribution::uniform(1.0, 4.0).unwrap(); n],
        )
        .unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let q = CostFunction::quadratic(0.1).unwrap();
        assert_eq!(optimal_theta_closed_form(&q, 1.0).unwrap(), 5.0);
        let q = CostFunction::quadratic(0.25).unwrap();
        assert_eq!(optimal_theta_closed_form(&q, 1.0).unwrap(), 2.0);
        assert!(optimal_theta_closed_form(&q, 0.0).is_err());
        assert!(optimal_theta_closed_form(&q, -1.0).is_err());
        let r = QualityResult::closed_form(&q, 1.0).unwrap();
        assert_eq!((r.theta_star, r.method), (2.0, QualityMethod::ClosedForm));
        assert!(r.curve.is_none());
    }

    #[test]
    fn closed_form_matches_sweep_of_limit_objective() {
        // θ·a - αθ² sampled finely peaks at a/(2α).
        let alpha = 0.25;
        let best = (1..=4000)
            .map(|k| k as f64 * 0.001)
            .max_by(|x, y| (x - alpha * x * x).total_cmp(&(y - alpha * y * y)))
            .unwrap();
        let q = CostFunction::quadratic(alpha).unwrap();
        assert!((optimal_theta_closed_form(&q, 1.0).unwrap() - best).abs() <= 0.001);
    }

    #[test]
    fn single_point_grid() {
        let r = er_curve(&homogeneous(10, 1.0), &[3.0], 50, 1).unwrap();
        assert_eq!(r.theta_star, 3.0);
        assert_eq!(r.curve.as_ref().unwrap().len(), 1);
        assert_eq!(r.method, QualityMethod::NumericSweep);
    }

    #[test]
    fn curve_is_sorted_nonnegative_and_deterministic() {
        let inst = homogeneous(20, 1.0);
        let a = er_curve(&inst, &[4.0, 1.0, 7.0, 2.5], 200, 3).unwrap();
        let b = er_curve(&inst, &[4.0, 1.0, 7.0, 2.5], 200, 3).unwrap();
        assert_eq!(a, b);
        let c = a.curve.unwrap();
        assert!(c.windows(2).all(|w| w[0].theta < w[1].theta));
        assert!(c.iter().all(|p| p.er.mean >= 0.0));
    }

    #[test]
    fn empty_grid_rejected() {
        assert!(er_curve(&homogeneous(5, 1.0), &[], 10, 0).is_err());
        assert!(er_curve(&homogeneous(5, 1.0), &[1.0], 0, 0).is_err());
    }

    #[test]
    fn per_user_revenue_approaches_large_market_limit() {
        let n = 200;
        let r = er_curve(&homogeneous(n, 1.0), &[5.0], 2000, 7).unwrap();
        let per_user = r.er_at_star.unwrap().mean / n as f64;
        let limit = 0.7 * (5.0 * 1.0 - 0.1 * 25.0);
        assert!(
            ((per_user - limit) / limit).abs() <= 0.10,
            "per-user ER {per_user} vs limit {limit}"
        );
    }
}
