//! Reward model: the exponential path-cost reward per circuit, the weighted
//! total, and the demonstration filter.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::planner::octile;
use crate::scenario::{CircuitLabel, Scenario};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("invalid cost {cost} for mincost {mincost}")]
    InvalidCost { cost: f64, mincost: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RewardParams {
    /// Exponent scale of the discharge-style reward curve.
    pub mu: f64,
    pub weight_a: f64,
    pub weight_b: f64,
    /// Demonstrations are kept only at or above this total reward.
    pub filter_threshold: f64,
    /// Reward assigned to a circuit the planner could not route.
    pub fail_reward: f64,
}

impl Default for RewardParams {
    fn default() -> Self {
        Self {
            mu: 5.0,
            weight_a: 0.5,
            weight_b: 0.5,
            filter_threshold: 0.9,
            fail_reward: 0.0,
        }
    }
}

impl RewardParams {
    pub fn validate(&self) {
        assert!(self.mu > 0.0, "mu must be positive");
        assert!(
            (self.weight_a + self.weight_b - 1.0).abs() < 1e-9,
            "weights must sum to 1"
        );
        assert!((0.0..=1.0).contains(&self.weight_a));
        assert!((0.0..=1.0).contains(&self.weight_b));
    }

    /// Single-circuit weighting used by the non-inverted tasks.
    pub fn single_circuit() -> Self {
        Self {
            weight_a: 1.0,
            weight_b: 0.0,
            ..Self::default()
        }
    }
}

/// Per-circuit and total reward for one finished episode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub mincost_a: f64,
    pub cost_a: Option<f64>,
    pub reward_a: f64,
    pub mincost_b: f64,
    pub cost_b: Option<f64>,
    pub reward_b: f64,
    pub total: f64,
}

/// Best achievable path cost between a pair's electrodes on an empty board:
/// the octile geodesic. This is the normalizer that makes reward 1.0
/// attainable exactly when the drawn circuit is a direct route.
pub fn mincost(scenario: &Scenario, pair: CircuitLabel) -> f64 {
    let (robot, source) = scenario.circuit_endpoints(pair);
    octile(robot, source)
}

/// Discharge-curve reward for one circuit: `exp((mincost - cost)/cost * mu)`.
///
/// Equals 1 exactly when `cost == mincost` and decreases monotonically with
/// cost towards `exp(-mu)`. Costs a hair under mincost (floating-point dust
/// from path summation) are clamped rather than rejected.
pub fn reward_one_circuit(cost: f64, mincost: f64, mu: f64) -> Result<f64, RewardError> {
    if cost <= 0.0 || cost < mincost - 1e-9 {
        return Err(RewardError::InvalidCost { cost, mincost });
    }
    if cost <= mincost {
        return Ok(1.0);
    }
    Ok(((mincost - cost) / cost * mu).exp())
}

/// Combines per-circuit costs into the weighted total. `None` costs mean the
/// planner found no route and score `fail_reward`.
pub fn total_reward(
    cost_a: Option<f64>,
    mincost_a: f64,
    cost_b: Option<f64>,
    mincost_b: f64,
    params: &RewardParams,
) -> RewardBreakdown {
    params.validate();
    let one = |cost: Option<f64>, mc: f64| -> (f64, Option<f64>) {
        match cost {
            Some(c) => (
                reward_one_circuit(c, mc, params.mu).unwrap_or(params.fail_reward),
                Some(c),
            ),
            None => (params.fail_reward, None),
        }
    };
    let (reward_a, cost_a) = one(cost_a, mincost_a);
    let (reward_b, cost_b) = one(cost_b, mincost_b);
    RewardBreakdown {
        mincost_a,
        cost_a,
        reward_a,
        mincost_b,
        cost_b,
        reward_b,
        total: reward_a * params.weight_a + reward_b * params.weight_b,
    }
}

/// Demonstration filter: inclusive at the threshold.
pub fn passes_filter(total: f64, params: &RewardParams) -> bool {
    total >= params.filter_threshold
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::GridSpec;
    use crate::task::TaskKind;

    #[test]
    fn mincost_octile_geodesic() {
        let s = Scenario::empty(GridSpec::default(), TaskKind::RemoveObstacle, 0, false);
        // Electrodes at (4,80) and (315,80): 311 straight cells.
        assert!((mincost(&s, CircuitLabel::A) - 311.0).abs() < 1e-12);
        let inv = Scenario::empty(GridSpec::default(), TaskKind::AllInOne, 0, true);
        let expect = 311.0 + 80.0 * (std::f64::consts::SQRT_2 - 1.0);
        assert!((mincost(&inv, CircuitLabel::A) - expect).abs() < 1e-9);
    }

    #[test]
    fn reward_formula_values() {
        assert_eq!(reward_one_circuit(10.0, 10.0, 5.0).unwrap(), 1.0);
        let r = reward_one_circuit(20.0, 10.0, 5.0).unwrap();
        assert!((r - (-2.5f64).exp()).abs() < 1e-12);
        let r2 = reward_one_circuit(11.0, 10.0, 5.0).unwrap();
        assert!((r2 - (-5.0f64 / 11.0).exp()).abs() < 1e-12);
    }

    #[test]
    fn invalid_costs_rejected() {
        assert!(reward_one_circuit(5.0, 10.0, 5.0).is_err());
        assert!(reward_one_circuit(0.0, 0.0, 5.0).is_err());
        assert!(reward_one_circuit(-1.0, 10.0, 5.0).is_err());
    }

    #[test]
    fn total_reward_weighting() {
        let params = RewardParams::default();
        // reward_a = 1.0, reward_b = 0.6 -> 0.8.
        let cost_b = 10.0;
        let mc_b = cost_b * (1.0 + (0.6f64).ln() / 5.0); // solve exp((mc-c)/c*5)=0.6
        let b = total_reward(Some(10.0), 10.0, Some(cost_b), mc_b, &params);
        assert!((b.reward_a - 1.0).abs() < 1e-12);
        assert!((b.reward_b - 0.6).abs() < 1e-9);
        assert!((b.total - 0.8).abs() < 1e-9);
    }

    #[test]
    fn unplannable_circuit_scores_fail_reward() {
        let params = RewardParams::default();
        let b = total_reward(Some(10.0), 10.0, None, 10.0, &params);
        assert_eq!(b.reward_b, 0.0);
        assert_eq!(b.cost_b, None);
        assert!((b.total - 0.5).abs() < 1e-12);
    }

    #[test]
    fn single_circuit_weighting() {
        let params = RewardParams::single_circuit();
        let b = total_reward(Some(10.0), 10.0, None, 10.0, &params);
        assert_eq!(b.total, 1.0);
    }

    #[test]
    fn filter_is_inclusive() {
        let params = RewardParams::default();
        assert!(passes_filter(1.0, &params));
        assert!(!passes_filter(0.77, &params));
        assert!(passes_filter(0.9, &params));
    }

    #[test]
    fn asymptote_approaches_exp_neg_mu() {
        let r = reward_one_circuit(1e12, 10.0, 5.0).unwrap();
        assert!((r - (-5.0f64).exp()).abs() < 1e-9);
    }
}
