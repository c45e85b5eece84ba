//! Impact Q-learning: learning rates tied to an agent's share of the joint
//! control.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImpactParams {
    pub lambda_high: f64,
    pub lambda_low: f64,
    /// Large learning rate (high impact, or cooperative medium impact).
    pub alpha: f64,
    /// Medium learning rate (conflicting medium impact).
    pub sigma: f64,
    /// Small learning rate (low impact and all imagined experiences).
    pub beta: f64,
}

impl Default for ImpactParams {
    fn default() -> Self {
        Self {
            lambda_high: 0.8,
            lambda_low: 0.2,
            alpha: 5e-4,
            sigma: 2e-4,
            beta: 5e-5,
        }
    }
}

impl ImpactParams {
    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.lambda_low && self.lambda_low < self.lambda_high && self.lambda_high <= 1.0) {
            return Err(Error::config(
                "impact.lambda_low/lambda_high",
                format!(
                    "need 0 <= lambda_low < lambda_high <= 1, got {} and {}",
                    self.lambda_low, self.lambda_high
                ),
            ));
        }
        if !(0.0 < self.beta && self.beta < self.sigma && self.sigma < self.alpha && self.alpha < 1.0) {
            return Err(Error::config(
                "impact.alpha/sigma/beta",
                format!(
                    "need 0 < beta < sigma < alpha < 1, got alpha={} sigma={} beta={}",
                    self.alpha, self.sigma, self.beta
                ),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tier {
    High,
    MidCoop,
    MidConflict,
    Low,
}

impl Tier {
    pub const ALL: [Tier; 4] = [Tier::High, Tier::MidCoop, Tier::MidConflict, Tier::Low];

    pub fn name(self) -> &'static str {
        match self {
            Tier::High => "high",
            Tier::MidCoop => "mid_coop",
            Tier::MidConflict => "mid_conflict",
            Tier::Low => "low",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TierChoice {
    pub tier: Tier,
    pub lr: f64,
    pub simulate_coordination: bool,
}

/// `|u_i| / sum_j |u_j|`; `1/N` when every control is zero.
pub fn impact_factor(agent: usize, u_joint: &[f64]) -> Result<f64> {
    let own = *u_joint.get(agent).ok_or(Error::AgentIndex {
        index: agent,
        agents: u_joint.len(),
    })?;
    let total: f64 = u_joint.iter().map(|u| u.abs()).sum();
    if total == 0.0 {
        return Ok(1.0 / u_joint.len() as f64);
    }
    Ok(own.abs() / total)
}

/// Mean of every control except the agent's own.
pub fn partner_mean(agent: usize, u_joint: &[f64]) -> Result<f64> {
    if agent >= u_joint.len() {
        return Err(Error::AgentIndex {
            index: agent,
            agents: u_joint.len(),
        });
    }
    if u_joint.len() < 2 {
        return Err(Error::config("agents", "coordination needs at least two agents"));
    }
    let others: f64 = u_joint
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != agent)
        .map(|(_, u)| u)
        .sum();
    Ok(others / (u_joint.len() - 1) as f64)
}

/// Sign of `partner_mean * u_i`, in `{-1, 0, 1}`.
pub fn coordination_coefficient(agent: usize, u_joint: &[f64]) -> Result<i8> {
    let product = partner_mean(agent, u_joint)? * u_joint[agent];
    Ok(if product > 0.0 {
        1
    } else if product < 0.0 {
        -1
    } else {
        0
    })
}

/// Both middle-tier bounds are inclusive. A non-negative `psi` promotes the
/// middle tier to `alpha`; a negative one keeps `sigma` and asks for the
/// coordination scenarios.
pub fn select_tier(lambda: f64, psi: i8, params: &ImpactParams) -> TierChoice {
    let (tier, lr) = if lambda > params.lambda_high {
        (Tier::High, params.alpha)
    } else if lambda >= params.lambda_low {
        if psi >= 0 {
            (Tier::MidCoop, params.alpha)
        } else {
            (Tier::MidConflict, params.sigma)
        }
    } else {
        (Tier::Low, params.beta)
    };
    TierChoice {
        tier,
        lr,
        simulate_coordination: tier == Tier::MidConflict,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn impact_examples() {
        assert_eq!(impact_factor(0, &[2.0, 2.0]).unwrap(), 0.5);
        assert_eq!(impact_factor(0, &[8.0, -2.0]).unwrap(), 0.8);
        assert_eq!(impact_factor(1, &[8.0, -2.0]).unwrap(), 0.2);
        assert_eq!(impact_factor(0, &[0.0, 0.0]).unwrap(), 0.5);
        assert_eq!(impact_factor(2, &[0.0, 0.0, 0.0]).unwrap(), 1.0 / 3.0);
        assert!(impact_factor(2, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn coordination_examples() {
        assert_eq!(coordination_coefficient(0, &[1.0, -0.5]).unwrap(), -1);
        assert_eq!(coordination_coefficient(0, &[3.0, 2.0]).unwrap(), 1);
        assert_eq!(coordination_coefficient(0, &[1.0, 0.0]).unwrap(), 0);
        assert_eq!(coordination_coefficient(1, &[4.0, -1.0, -1.0]).unwrap(), -1);
        assert!(coordination_coefficient(0, &[1.0]).is_err());
    }

    #[test]
    fn tier_examples() {
        let p = ImpactParams::default();
        let high = select_tier(0.9, -1, &p);
        assert_eq!((high.tier, high.lr, high.simulate_coordination), (Tier::High, 5e-4, false));
        let conflict = select_tier(0.5, -1, &p);
        assert_eq!((conflict.tier, conflict.lr, conflict.simulate_coordination), (Tier::MidConflict, 2e-4, true));
        let coop = select_tier(0.5, 0, &p);
        assert_eq!((coop.tier, coop.lr), (Tier::MidCoop, 5e-4));
        let low = select_tier(0.1, 1, &p);
        assert_eq!((low.tier, low.lr), (Tier::Low, 5e-5));
        // inclusive middle bounds
        assert_eq!(select_tier(0.8, 1, &p).tier, Tier::MidCoop);
        assert_eq!(select_tier(0.2, -1, &p).tier, Tier::MidConflict);
    }

    #[test]
    fn default_params_are_valid() {
        ImpactParams::default().validate().unwrap();
        let bad = ImpactParams {
            sigma: 1e-3,
            ..ImpactParams::default()
        };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn impacts_sum_to_one(u in proptest::collection::vec(-10.0f64..10.0, 2..6)) {
            let total: f64 = (0..u.len()).map(|i| impact_factor(i, &u).unwrap()).sum();
            prop_assert!((total - 1.0).abs() < 1e-12);
        }

        #[test]
        fn impact_is_scale_invariant(u in proptest::collection::vec(-10.0f64..10.0, 2..6), c in prop_oneof![-100.0f64..-0.01, 0.01f64..100.0]) {
            let scaled: Vec<f64> = u.iter().map(|v| v * c).collect();
            for i in 0..u.len() {
                prop_assert!((impact_factor(i, &u).unwrap() - impact_factor(i, &scaled).unwrap()).abs() < 1e-12);
            }
        }

        #[test]
        fn psi_is_odd_in_own_control(u in proptest::collection::vec(-10.0f64..10.0, 2..5)) {
            let psi = coordination_coefficient(0, &u).unwrap();
            let mut flipped = u.clone();
            flipped[0] = -flipped[0];
            prop_assert_eq!(coordination_coefficient(0, &flipped).unwrap(), -psi);
        }
    }
}
