//! Two-agent cart-pole co-control environment.
//!
//! Agents push the same cart; their forces are summed and clipped before the
//! nonlinear dynamics are integrated with semi-implicit Euler. The equations
//! are evaluated exactly as written with a signed gravitational constant
//! (default `-9.8`), which makes the upright configuration a restoring one:
//! for small `theta` the angular acceleration has the opposite sign.
//!
//! Each agent owns a reward function. The balancing agent is paid for keeping
//! the pole inside the angle band; the positioning agent is paid in steps
//! according to the distance of the cart from its target.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `[s, s_dot, theta, theta_dot]`
pub type StateVec = [f64; 4];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhysicsParams {
    /// Signed gravitational constant (m/s²).
    pub gravity: f64,
    pub mass_pole: f64,
    pub mass_cart: f64,
    /// Half of the pole length (m).
    pub half_length: f64,
    /// Symmetric bound on the summed force (N).
    pub force_clip: f64,
    /// Integration step (s).
    pub dt: f64,
    /// Per-agent control bound (N).
    pub u_max: f64,
    /// Episode fails once `|s|` exceeds this (m).
    pub position_limit: f64,
    /// Episode fails once `|theta|` reaches this (rad).
    pub angle_limit: f64,
}

impl Default for PhysicsParams {
    fn default() -> Self {
        Self {
            gravity: -9.8,
            mass_pole: 0.1,
            mass_cart: 1.0,
            half_length: 0.5,
            force_clip: 10.0,
            dt: 0.02,
            u_max: 10.0,
            position_limit: 2.4,
            angle_limit: 0.21,
        }
    }
}

impl PhysicsParams {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("physics.mass_pole", self.mass_pole),
            ("physics.mass_cart", self.mass_cart),
            ("physics.half_length", self.half_length),
            ("physics.force_clip", self.force_clip),
            ("physics.dt", self.dt),
            ("physics.u_max", self.u_max),
            ("physics.position_limit", self.position_limit),
            ("physics.angle_limit", self.angle_limit),
        ];
        for (field, value) in positive {
            if !(value.is_finite() && value > 0.0) {
                return Err(Error::config(field, format!("must be finite and > 0, got {value}")));
            }
        }
        if !self.gravity.is_finite() {
            return Err(Error::config("physics.gravity", "must be finite"));
        }
        Ok(())
    }
}

/// Physical state plus the episode step counter.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CartPoleState {
    pub s: f64,
    pub s_dot: f64,
    pub theta: f64,
    pub theta_dot: f64,
    pub step_index: u64,
}

impl CartPoleState {
    pub fn from_vec(x: StateVec, step_index: u64) -> Self {
        Self {
            s: x[0],
            s_dot: x[1],
            theta: x[2],
            theta_dot: x[3],
            step_index,
        }
    }

    pub fn to_vec(&self) -> StateVec {
        [self.s, self.s_dot, self.theta, self.theta_dot]
    }
}

/// The known system model `f`: accelerations, integration and the failure
/// predicate. Carries no episode state.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Dynamics {
    pub params: PhysicsParams,
}

impl Dynamics {
    pub fn new(params: PhysicsParams) -> Self {
        Self { params }
    }

    /// Returns `(theta_ddot, s_ddot)` for an already clipped force.
    pub fn accelerations(&self, x: &StateVec, f_res: f64) -> (f64, f64) {
        let p = &self.params;
        let theta = x[2];
        let theta_dot = x[3];
        let (sin, cos) = theta.sin_cos();
        let total_mass = p.mass_pole + p.mass_cart;

        let bracket = (-f_res - p.mass_pole * p.half_length * theta_dot * theta_dot * sin) / total_mass;
        let theta_ddot = (p.gravity * sin - cos * bracket)
            / (p.half_length * (4.0 / 3.0 - p.mass_pole * cos * cos / total_mass));
        let s_ddot = (f_res
            + p.mass_pole * p.half_length * (theta_dot * theta_dot * sin - theta_ddot * cos))
            / total_mass;
        (theta_ddot, s_ddot)
    }

    pub fn clip_force(&self, total: f64) -> f64 {
        total.clamp(-self.params.force_clip, self.params.force_clip)
    }

    /// One semi-implicit Euler step under a clipped resultant force.
    pub fn integrate(&self, x: &StateVec, f_res: f64) -> StateVec {
        let dt = self.params.dt;
        let (theta_ddot, s_ddot) = self.accelerations(x, f_res);
        let s_dot = x[1] + dt * s_ddot;
        let theta_dot = x[3] + dt * theta_ddot;
        [x[0] + dt * s_dot, s_dot, x[2] + dt * theta_dot, theta_dot]
    }

    /// Successor state under a joint control; forces are summed then clipped.
    pub fn transition(&self, x: &StateVec, controls: &[f64]) -> StateVec {
        let f_res = self.clip_force(controls.iter().sum());
        self.integrate(x, f_res)
    }

    /// Out-of-bounds test. Position uses a closed interval; an angle of exactly
    /// `angle_limit` already counts as failed.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn failed(&self, x: &StateVec) -> bool {
        let p = &self.params;
        !(x[0].abs() <= p.position_limit) || !(x[2].abs() < p.angle_limit)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case", deny_unknown_fields)]
pub enum AgentRole {
    Balance,
    Position { target: f64 },
}

/// Reward values and position bands shared by all agents of a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSpec {
    pub roles: Vec<AgentRole>,
    pub alive_reward: f64,
    pub terminal_reward: f64,
    /// Distance bands `near < mid < far` (m) for the positioning role.
    pub near: f64,
    pub mid: f64,
    pub far: f64,
    pub near_reward: f64,
    pub mid_reward: f64,
    pub far_reward: f64,
}

impl Default for RewardSpec {
    fn default() -> Self {
        Self {
            roles: vec![AgentRole::Balance, AgentRole::Position { target: 0.0 }],
            alive_reward: 1.0,
            terminal_reward: -1.0,
            near: 0.1,
            mid: 0.5,
            far: 2.4,
            near_reward: 5.0,
            mid_reward: 1.0,
            far_reward: 0.0,
        }
    }
}

impl RewardSpec {
    pub fn agents(&self) -> usize {
        self.roles.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.roles.is_empty() {
            return Err(Error::config("reward.roles", "at least one agent is required"));
        }
        if !(0.0 < self.near && self.near < self.mid && self.mid < self.far) {
            return Err(Error::config(
                "reward.near/mid/far",
                format!("thresholds must satisfy 0 < near < mid < far, got {} {} {}", self.near, self.mid, self.far),
            ));
        }
        Ok(())
    }

    pub fn for_agent(&self, agent: usize) -> Result<AgentReward> {
        let role = *self.roles.get(agent).ok_or(Error::AgentIndex {
            index: agent,
            agents: self.roles.len(),
        })?;
        Ok(AgentReward {
            role,
            spec: self.clone(),
        })
    }

    /// Reward of `agent` for arriving in `x`.
    pub fn reward(&self, agent: usize, x: &StateVec, terminated: bool, dynamics: &Dynamics) -> Result<f64> {
        Ok(self.for_agent(agent)?.eval(x, terminated, dynamics))
    }
}

/// One agent's own reward function `g_i`.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentReward {
    pub role: AgentRole,
    spec: RewardSpec,
}

impl AgentReward {
    /// `terminated` means the episode failed; the terminal value overrides
    /// every step reward.
    pub fn eval(&self, x: &StateVec, terminated: bool, dynamics: &Dynamics) -> f64 {
        let spec = &self.spec;
        if terminated {
            return spec.terminal_reward;
        }
        match self.role {
            AgentRole::Balance => {
                let limit = dynamics.params.angle_limit;
                if x[2] > -limit && x[2] < limit {
                    spec.alive_reward
                } else {
                    0.0
                }
            }
            AgentRole::Position { target } => {
                let d = (x[0] - target).abs();
                if d < spec.near {
                    spec.near_reward
                } else if d < spec.mid {
                    spec.mid_reward
                } else {
                    spec.far_reward
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResetSpec {
    /// `s0 ~ U(-position_range, position_range)`
    pub position_range: f64,
    /// `theta0 ~ U(-angle_range, angle_range)`
    pub angle_range: f64,
}

impl Default for ResetSpec {
    fn default() -> Self {
        Self {
            position_range: 2.3,
            angle_range: 0.085,
        }
    }
}

impl ResetSpec {
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> CartPoleState {
        let s = rng.gen_range(-self.position_range..self.position_range);
        let theta = rng.gen_range(-self.angle_range..self.angle_range);
        CartPoleState {
            s,
            s_dot: 0.0,
            theta,
            theta_dot: 0.0,
            step_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub state: CartPoleState,
    pub rewards: Vec<f64>,
    /// Episode is over, for any reason.
    pub terminated: bool,
    /// Episode ended by leaving the admissible region (not by the step limit).
    pub failed: bool,
}

#[derive(Debug, Clone)]
pub struct CartPole {
    dynamics: Dynamics,
    rewards: RewardSpec,
    reset_spec: ResetSpec,
    max_steps: u64,
    state: CartPoleState,
    done: bool,
}

impl CartPole {
    pub fn new(physics: PhysicsParams, rewards: RewardSpec, reset_spec: ResetSpec, max_steps: u64) -> Self {
        Self {
            dynamics: Dynamics::new(physics),
            rewards,
            reset_spec,
            max_steps,
            state: CartPoleState::default(),
            done: false,
        }
    }

    pub fn agents(&self) -> usize {
        self.rewards.agents()
    }

    pub fn dynamics(&self) -> &Dynamics {
        &self.dynamics
    }

    pub fn reward_spec(&self) -> &RewardSpec {
        &self.rewards
    }

    pub fn max_steps(&self) -> u64 {
        self.max_steps
    }

    pub fn state(&self) -> CartPoleState {
        self.state
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> CartPoleState {
        self.state = self.reset_spec.sample(rng);
        self.done = false;
        self.state
    }

    /// Starts an episode from a given state. A state that is already out of
    /// bounds leaves the episode terminated.
    pub fn reset_to(&mut self, state: CartPoleState) -> CartPoleState {
        self.state = CartPoleState { step_index: 0, ..state };
        self.done = self.dynamics.failed(&self.state.to_vec());
        self.state
    }

    pub fn step(&mut self, controls: &[f64]) -> Result<StepOutcome> {
        if self.done {
            return Err(Error::EpisodeTerminated);
        }
        self.check_controls(controls)?;
        let outcome = self.peek(&self.state, controls);
        self.state = outcome.state;
        self.done = outcome.terminated;
        Ok(outcome)
    }

    /// The transition `step` would produce from `state`, without touching the
    /// live episode.
    pub fn peek(&self, state: &CartPoleState, controls: &[f64]) -> StepOutcome {
        let next = self.dynamics.transition(&state.to_vec(), controls);
        let failed = self.dynamics.failed(&next);
        let step_index = state.step_index + 1;
        let rewards = (0..self.agents())
            .map(|i| {
                self.rewards
                    .reward(i, &next, failed, &self.dynamics)
                    .expect("agent index within roles")
            })
            .collect();
        StepOutcome {
            state: CartPoleState::from_vec(next, step_index),
            rewards,
            terminated: failed || step_index >= self.max_steps,
            failed,
        }
    }

    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    fn check_controls(&self, controls: &[f64]) -> Result<()> {
        if controls.len() != self.agents() {
            return Err(Error::ControlCount {
                expected: self.agents(),
                got: controls.len(),
            });
        }
        let u_max = self.dynamics.params.u_max;
        for (agent, &value) in controls.iter().enumerate() {
            if !(value.abs() <= u_max) {
                return Err(Error::ControlOutOfRange { agent, value, u_max });
            }
        }
        Ok(())
    }
}
