//! Decentralized training loop.
//!
//! Every agent owns its network, replay memory, exploration rate and random
//! stream. Agents act on the same state, the environment steps once, and each
//! agent stores the transition with its own reward and the retrospectively
//! observed joint control. Each agent then samples a temporal mini-batch and
//! trains on
//!
//! * the marginal imagined experience, with probability `eps_c` (rate `beta`),
//! * the real experience, at the rate of its impact tier,
//! * the idle/coop1/coop2 scenarios for conflicting medium-impact samples,
//!   with probability `1 - eps_c` (rate `beta`).
//!
//! Target networks are hard-synced every `target_period` global steps.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::env::{CartPole, StateVec};
use crate::error::{Error, Result};
use crate::imagination::{imagine, AgentModel, Scenario};
use crate::impact::{coordination_coefficient, impact_factor, select_tier, ImpactParams, Tier};
use crate::qnet::{CheckpointMeta, NafNetwork, UpdateSample};
use crate::replay::{Experience, ReplayMemory, TerParams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// `E_max`
    pub episodes: u64,
    /// `K_max`
    pub max_steps: u64,
    /// Multiplicative exploration decay applied after each episode.
    pub decay: f64,
    pub eps_min: f64,
    /// Target sync period `m` in global steps.
    pub target_period: u64,
    pub gamma: f64,
    /// One optimizer step per experience instead of one per learning-rate
    /// bucket.
    pub per_sample_updates: bool,
    /// Reuse the marginal-imagination draw for the coordination gate.
    pub shared_gate_draw: bool,
    /// Write checkpoints every this many episodes (0: only at the end).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            episodes: 2000,
            max_steps: 3000,
            decay: 0.999,
            eps_min: 0.01,
            target_period: 4000,
            gamma: 0.999,
            per_sample_updates: false,
            shared_gate_draw: true,
            checkpoint_every: 100,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.episodes == 0 {
            return Err(Error::config("train.episodes", "must be > 0"));
        }
        if self.max_steps == 0 {
            return Err(Error::config("train.max_steps", "must be > 0"));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::config("train.decay", format!("must lie in (0, 1], got {}", self.decay)));
        }
        if !(self.eps_min > 0.0 && self.eps_min <= 1.0) {
            return Err(Error::config("train.eps_min", format!("must lie in (0, 1], got {}", self.eps_min)));
        }
        if self.target_period == 0 {
            return Err(Error::config("train.target_period", "must be > 0"));
        }
        if !(0.0..1.0).contains(&self.gamma) {
            return Err(Error::config("train.gamma", format!("must lie in [0, 1), got {}", self.gamma)));
        }
        Ok(())
    }
}

/// Update tallies of one agent. `gradient_samples` counts every sample fed
/// to the optimizer.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct UpdateCounts {
    pub sampled: u64,
    pub high: u64,
    pub mid_coop: u64,
    pub mid_conflict: u64,
    pub low: u64,
    pub marginal: u64,
    pub coordination_events: u64,
    pub gradient_samples: u64,
    pub optimizer_steps: u64,
}

impl UpdateCounts {
    fn tier(&mut self, tier: Tier) {
        match tier {
            Tier::High => self.high += 1,
            Tier::MidCoop => self.mid_coop += 1,
            Tier::MidConflict => self.mid_conflict += 1,
            Tier::Low => self.low += 1,
        }
    }

    pub fn add(&mut self, other: &UpdateCounts) {
        self.sampled += other.sampled;
        self.high += other.high;
        self.mid_coop += other.mid_coop;
        self.mid_conflict += other.mid_conflict;
        self.low += other.low;
        self.marginal += other.marginal;
        self.coordination_events += other.coordination_events;
        self.gradient_samples += other.gradient_samples;
        self.optimizer_steps += other.optimizer_steps;
    }

    /// `gradient_samples = sampled + marginal + 3 * coordination_events` and
    /// the tiers partition the sampled experiences.
    pub fn reconciles(&self) -> bool {
        self.gradient_samples == self.sampled + self.marginal + 3 * self.coordination_events
            && self.sampled == self.high + self.mid_coop + self.mid_conflict + self.low
            && self.coordination_events <= self.mid_conflict
    }
}

/// One decentralized learner.
#[derive(Debug, Clone)]
pub struct Agent {
    pub id: usize,
    pub model: AgentModel,
    pub net: NafNetwork,
    pub memory: ReplayMemory,
    pub impact: ImpactParams,
    pub gamma: f64,
    pub epsilon: f64,
    rng: ChaCha8Rng,
    totals: UpdateCounts,
}

/// Result of one agent's learning pass.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LearnOutcome {
    pub counts: UpdateCounts,
    pub loss: Option<f64>,
}

impl Agent {
    pub fn new(id: usize, model: AgentModel, net: NafNetwork, capacity: usize, impact: ImpactParams, gamma: f64, rng: ChaCha8Rng) -> Self {
        Self {
            id,
            model,
            net,
            memory: ReplayMemory::new(capacity),
            impact,
            gamma,
            epsilon: 1.0,
            rng,
            totals: UpdateCounts::default(),
        }
    }

    pub fn totals(&self) -> UpdateCounts {
        self.totals
    }

    /// Epsilon-greedy control: uniform over the control range with
    /// probability `epsilon`, otherwise the clamped NAF mean.
    pub fn act(&mut self, x: &StateVec) -> f64 {
        let u_max = self.net.u_max();
        if self.rng.gen::<f64>() < self.epsilon {
            self.rng.gen_range(-u_max..=u_max)
        } else {
            self.net.greedy_control(x)
        }
    }

    pub fn remember(&mut self, experience: Experience) {
        self.memory.push(experience);
    }

    /// Samples a temporal mini-batch and applies the impact-tiered updates.
    /// Returns no loss when the memory is still too small.
    pub fn learn(&mut self, k_now: u64, ter: &TerParams, train: &TrainConfig) -> Result<LearnOutcome> {
        let batch = match self.memory.sample_ter(ter, self.epsilon, k_now, &mut self.rng) {
            Ok(batch) => batch.into_iter().cloned().collect::<Vec<_>>(),
            Err(Error::InsufficientExperiences { .. }) => return Ok(LearnOutcome::default()),
            Err(e) => return Err(e),
        };

        let mut counts = UpdateCounts::default();
        let mut samples: Vec<UpdateSample> = Vec::with_capacity(batch.len() * 2);
        let beta = self.impact.beta;
        for c in &batch {
            counts.sampled += 1;
            let w = self.rng.gen::<f64>();
            if w < c.eps_c {
                let im = imagine(&self.model, Scenario::Marginal, &c.x, &c.u_joint, self.id)?;
                let y = self.net.td_target(im.r, &im.x_next, im.terminal, self.gamma);
                samples.push(UpdateSample { x: c.x, u: im.u_own, y, lr: beta });
                counts.marginal += 1;
            }

            let lambda = impact_factor(self.id, &c.u_joint)?;
            let psi = if c.u_joint.len() > 1 {
                coordination_coefficient(self.id, &c.u_joint)?
            } else {
                0
            };
            let choice = select_tier(lambda, psi, &self.impact);
            let y = self.net.td_target(c.r, &c.x_next, c.terminal, self.gamma);
            samples.push(UpdateSample {
                x: c.x,
                u: c.u_joint[self.id],
                y,
                lr: choice.lr,
            });
            counts.tier(choice.tier);

            if choice.simulate_coordination {
                let gate = if train.shared_gate_draw { w } else { self.rng.gen::<f64>() };
                if c.eps_c < gate {
                    for scenario in [Scenario::Idle, Scenario::Coop1, Scenario::Coop2] {
                        let im = imagine(&self.model, scenario, &c.x, &c.u_joint, self.id)?;
                        let y = self.net.td_target(im.r, &im.x_next, im.terminal, self.gamma);
                        samples.push(UpdateSample { x: c.x, u: im.u_own, y, lr: beta });
                    }
                    counts.coordination_events += 1;
                }
            }
        }

        counts.gradient_samples = samples.len() as u64;
        let steps_before = self.net.optimizer().steps();
        let loss = if train.per_sample_updates {
            let mut total = 0.0;
            for s in &samples {
                total += self.net.train_bucket(std::slice::from_ref(s), s.lr, &mut self.rng)?;
            }
            total / samples.len() as f64
        } else {
            self.net.update(&samples, &mut self.rng)?
        };
        counts.optimizer_steps = self.net.optimizer().steps() - steps_before;
        self.totals.add(&counts);
        Ok(LearnOutcome { counts, loss: Some(loss) })
    }

    pub fn decay_epsilon(&mut self, decay: f64, eps_min: f64) {
        self.epsilon = (decay * self.epsilon).max(eps_min);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepMetrics {
    pub controls: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
    pub updates: Vec<LearnOutcome>,
    pub target_synced: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeMetrics {
    pub episode: u64,
    pub length: u64,
    pub returns: Vec<f64>,
    pub discounted_returns: Vec<f64>,
    /// Exploration rate used during the episode.
    pub epsilons: Vec<f64>,
    pub counts: Vec<UpdateCounts>,
    /// Mean update loss per agent, `None` if the agent never updated.
    pub mean_loss: Vec<Option<f64>>,
}

pub struct Trainer {
    config: RunConfig,
    env: CartPole,
    agents: Vec<Agent>,
    env_rng: ChaCha8Rng,
    global_step: u64,
    episodes_done: u64,
    target_syncs: Vec<u64>,
    learning: bool,
    freeze_epsilon: bool,
}

/// Independent random stream `stream` of a run seed.
pub fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let env = CartPole::new(config.physics, config.reward.clone(), config.reset, config.train.max_steps);
        let agents = (0..env.agents())
            .map(|id| {
                let mut rng = stream_rng(config.seed, id as u64 + 1);
                let net = NafNetwork::new(&config.network, config.physics.u_max, &mut rng);
                let model = AgentModel {
                    dynamics: *env.dynamics(),
                    reward: config.reward.for_agent(id)?,
                };
                Ok(Agent::new(id, model, net, config.replay.capacity, config.impact, config.train.gamma, rng))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            env_rng: stream_rng(config.seed, 0),
            config,
            env,
            agents,
            global_step: 0,
            episodes_done: 0,
            target_syncs: Vec::new(),
            learning: true,
            freeze_epsilon: false,
        })
    }

    /// Acts uniformly at random and never learns; used for baselines.
    pub fn random_baseline(config: RunConfig) -> Result<Self> {
        let mut trainer = Self::new(config)?;
        trainer.learning = false;
        trainer.freeze_epsilon = true;
        for agent in &mut trainer.agents {
            agent.epsilon = 1.0;
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn agents(&self) -> &[Agent] {
        &self.agents
    }

    pub fn agents_mut(&mut self) -> &mut [Agent] {
        &mut self.agents
    }

    pub fn env(&self) -> &CartPole {
        &self.env
    }

    pub fn global_step(&self) -> u64 {
        self.global_step
    }

    pub fn episodes_done(&self) -> u64 {
        self.episodes_done
    }

    /// Global steps at which the targets were synced.
    pub fn target_syncs(&self) -> &[u64] {
        &self.target_syncs
    }

    pub fn reset_episode(&mut self) {
        self.env.reset(&mut self.env_rng);
    }

    /// One environment step followed by every agent's learning pass, in
    /// agent-index order.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let x = self.env.state().to_vec();
        let controls: Vec<f64> = self.agents.iter_mut().map(|a| a.act(&x)).collect();
        let outcome = self.env.step(&controls)?;
        let x_next = outcome.state.to_vec();
        let k_now = self.global_step;

        let mut updates = Vec::with_capacity(self.agents.len());
        for (agent, &reward) in self.agents.iter_mut().zip(&outcome.rewards) {
            agent.remember(Experience {
                x,
                u_joint: controls.clone(),
                r: reward,
                x_next,
                k_c: k_now,
                eps_c: agent.epsilon,
                terminal: outcome.failed,
            });
        }
        for agent in &mut self.agents {
            let learned = if self.learning {
                agent.learn(k_now, &self.config.replay, &self.config.train)?
            } else {
                LearnOutcome::default()
            };
            updates.push(learned);
        }

        self.global_step += 1;
        let target_synced = self.global_step.is_multiple_of(self.config.train.target_period);
        if target_synced {
            for agent in &mut self.agents {
                agent.net.sync_target();
            }
            self.target_syncs.push(self.global_step);
        }
        Ok(StepMetrics {
            controls,
            rewards: outcome.rewards,
            terminated: outcome.terminated,
            updates,
            target_synced,
        })
    }

    pub fn run_episode(&mut self) -> Result<EpisodeMetrics> {
        self.reset_episode();
        let n = self.agents.len();
        let gamma = self.config.train.gamma;
        let epsilons: Vec<f64> = self.agents.iter().map(|a| a.epsilon).collect();
        let mut returns = vec![0.0; n];
        let mut discounted = vec![0.0; n];
        let mut counts = vec![UpdateCounts::default(); n];
        let mut loss_sum = vec![0.0; n];
        let mut loss_n = vec![0u64; n];
        let mut discount = 1.0;
        let mut length = 0;
        loop {
            let step = self.train_step()?;
            length += 1;
            for i in 0..n {
                returns[i] += step.rewards[i];
                discounted[i] += discount * step.rewards[i];
                counts[i].add(&step.updates[i].counts);
                if let Some(loss) = step.updates[i].loss {
                    loss_sum[i] += loss;
                    loss_n[i] += 1;
                }
            }
            discount *= gamma;
            if step.terminated {
                break;
            }
        }
        if !self.freeze_epsilon {
            let (decay, eps_min) = (self.config.train.decay, self.config.train.eps_min);
            for agent in &mut self.agents {
                agent.decay_epsilon(decay, eps_min);
            }
        }
        self.episodes_done += 1;
        Ok(EpisodeMetrics {
            episode: self.episodes_done,
            length,
            returns,
            discounted_returns: discounted,
            epsilons,
            counts,
            mean_loss: loss_sum
                .iter()
                .zip(&loss_n)
                .map(|(s, &k)| (k > 0).then(|| s / k as f64))
                .collect(),
        })
    }

    /// Writes one checkpoint per agent into `dir` as `agent{i}{suffix}.ckpt`.
    pub fn save_checkpoints(&self, dir: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        self.agents
            .iter()
            .map(|agent| {
                let path = dir.join(format!("agent{}{}.ckpt", agent.id, suffix));
                let meta = CheckpointMeta {
                    agent: agent.id as u32,
                    episode: self.episodes_done,
                    epsilon: agent.epsilon,
                };
                agent.net.save(&path, &meta)?;
                Ok(path)
            })
            .collect()
    }
}

/// Column names of the per-episode metrics log.
pub fn metrics_header(agents: usize) -> Vec<String> {
    let mut header = vec!["episode".to_string(), "length".to_string()];
    for i in 0..agents {
        for name in [
            "return",
            "disc_return",
            "epsilon",
            "high",
            "mid_coop",
            "mid_conflict",
            "low",
            "marginal",
            "coordination",
            "gradient_samples",
            "mean_loss",
        ] {
            header.push(format!("{name}_{i}"));
        }
    }
    header
}

pub fn metrics_row(m: &EpisodeMetrics) -> Vec<String> {
    let mut row = vec![m.episode.to_string(), m.length.to_string()];
    for i in 0..m.returns.len() {
        let c = &m.counts[i];
        row.push(m.returns[i].to_string());
        row.push(m.discounted_returns[i].to_string());
        row.push(m.epsilons[i].to_string());
        for v in [c.high, c.mid_coop, c.mid_conflict, c.low, c.marginal, c.coordination_events, c.gradient_samples] {
            row.push(v.to_string());
        }
        row.push(m.mean_loss[i].map_or_else(String::new, |l| l.to_string()));
    }
    row
}

pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Outcome of a complete training run.
#[derive(Debug, Clone)]
pub struct RunSummary {
    pub output_dir: PathBuf,
    pub episodes: Vec<EpisodeMetrics>,
    pub final_checkpoints: Vec<PathBuf>,
}

/// Runs all configured episodes, writing the config snapshot, the metrics
/// log and checkpoints into the run's output directory.
pub fn train(config: &RunConfig) -> Result<RunSummary> {
    train_with(config, |_| {})
}

/// Like [`train`], calling `on_episode` after every episode.
pub fn train_with(config: &RunConfig, mut on_episode: impl FnMut(&EpisodeMetrics)) -> Result<RunSummary> {
    let mut trainer = Trainer::new(config.clone())?;
    let out = config.output_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    config.save(&out.join(CONFIG_SNAPSHOT))?;

    let metrics_path = out.join(METRICS_FILE);
    let file = File::create(&metrics_path).map_err(|e| Error::io(format!("creating {}", metrics_path.display()), e))?;
    let mut writer = csv::Writer::from_writer(BufWriter::new(file));
    let csv_err = |e: csv::Error| Error::io(format!("writing {}", metrics_path.display()), std::io::Error::other(e));
    writer.write_record(metrics_header(trainer.agents().len())).map_err(csv_err)?;

    let checkpoints = out.join("checkpoints");
    let mut episodes = Vec::with_capacity(config.train.episodes as usize);
    for _ in 0..config.train.episodes {
        let metrics = match trainer.run_episode() {
            Ok(m) => m,
            Err(e) => {
                writer.flush().map_err(|io| Error::io(format!("writing {}", metrics_path.display()), io))?;
                log::error!("aborting after {} episodes: {e}", trainer.episodes_done());
                return Err(e);
            }
        };
        writer.write_record(metrics_row(&metrics)).map_err(csv_err)?;
        writer.flush().map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;
        log::info!(
            "episode {} length {} returns {:?} eps {:.4}",
            metrics.episode,
            metrics.length,
            metrics.returns,
            metrics.epsilons[0]
        );
        on_episode(&metrics);
        let every = config.train.checkpoint_every;
        if every > 0 && metrics.episode % every == 0 && metrics.episode < config.train.episodes {
            trainer.save_checkpoints(&checkpoints, &format!("_ep{}", metrics.episode))?;
        }
        episodes.push(metrics);
    }
    let final_checkpoints = trainer.save_checkpoints(&out, "")?;
    writer
        .into_inner()
        .map_err(|e| Error::io(format!("writing {}", metrics_path.display()), std::io::Error::other(e.to_string())))?
        .flush()
        .map_err(|e| Error::io(format!("writing {}", metrics_path.display()), e))?;
    Ok(RunSummary {
        output_dir: out,
        episodes,
        final_checkpoints,
    })
}
