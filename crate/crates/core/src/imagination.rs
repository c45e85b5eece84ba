//! Single-step imagined transitions built from the known dynamics and the
//! owning agent's reward function, with the joint control rewritten.
//!
//! Imagined experiences are never stored; the trainer consumes each one in a
//! single update.

use crate::env::{AgentReward, Dynamics, StateVec};
use crate::error::{Error, Result};
use crate::impact::partner_mean;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    /// Partners' controls replaced by zero.
    Marginal,
    /// Own control replaced by zero.
    Idle,
    /// Own control replaced by the partners' mean.
    Coop1,
    /// Every partner copies the own control.
    Coop2,
}

/// What a single agent knows: the system dynamics and its own reward.
#[derive(Debug, Clone)]
pub struct AgentModel {
    pub dynamics: Dynamics,
    pub reward: AgentReward,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImaginedExperience {
    pub x: StateVec,
    /// Joint control after substitution.
    pub u_joint: Vec<f64>,
    /// The owning agent's control in the scenario.
    pub u_own: f64,
    pub r: f64,
    pub x_next: StateVec,
    pub terminal: bool,
    pub scenario: Scenario,
}

/// Joint control of `scenario` for `agent`, given the observed joint control.
pub fn substitute(scenario: Scenario, agent: usize, u_joint: &[f64]) -> Result<Vec<f64>> {
    if agent >= u_joint.len() {
        return Err(Error::AgentIndex {
            index: agent,
            agents: u_joint.len(),
        });
    }
    let own = u_joint[agent];
    let mut u = u_joint.to_vec();
    match scenario {
        Scenario::Marginal => {
            for (j, v) in u.iter_mut().enumerate() {
                if j != agent {
                    *v = 0.0;
                }
            }
        }
        Scenario::Idle => u[agent] = 0.0,
        Scenario::Coop1 => u[agent] = partner_mean(agent, u_joint)?,
        Scenario::Coop2 => u.iter_mut().for_each(|v| *v = own),
    }
    Ok(u)
}

pub fn imagine(
    model: &AgentModel,
    scenario: Scenario,
    x: &StateVec,
    u_joint: &[f64],
    agent: usize,
) -> Result<ImaginedExperience> {
    let u = substitute(scenario, agent, u_joint)?;
    let x_next = model.dynamics.transition(x, &u);
    let terminal = model.dynamics.failed(&x_next);
    let r = model.reward.eval(&x_next, terminal, &model.dynamics);
    Ok(ImaginedExperience {
        x: *x,
        u_own: u[agent],
        u_joint: u,
        r,
        x_next,
        terminal,
        scenario,
    })
}

pub fn imagine_marginal(model: &AgentModel, x: &StateVec, u_joint: &[f64], agent: usize) -> Result<ImaginedExperience> {
    imagine(model, Scenario::Marginal, x, u_joint, agent)
}

pub fn imagine_idle(model: &AgentModel, x: &StateVec, u_joint: &[f64], agent: usize) -> Result<ImaginedExperience> {
    imagine(model, Scenario::Idle, x, u_joint, agent)
}

pub fn imagine_coop1(model: &AgentModel, x: &StateVec, u_joint: &[f64], agent: usize) -> Result<ImaginedExperience> {
    imagine(model, Scenario::Coop1, x, u_joint, agent)
}

pub fn imagine_coop2(model: &AgentModel, x: &StateVec, u_joint: &[f64], agent: usize) -> Result<ImaginedExperience> {
    imagine(model, Scenario::Coop2, x, u_joint, agent)
}
