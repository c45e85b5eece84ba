//! Greedy evaluation, value surfaces and trajectory dumps of trained agents.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::config::RunConfig;
use crate::env::{CartPole, CartPoleState, StateVec};
use crate::error::{Error, Result};
use crate::qnet::NafNetwork;
use crate::trainer::stream_rng;

fn check_agents(nets: &[NafNetwork], config: &RunConfig) -> Result<()> {
    let agents = config.reward.agents();
    if nets.len() != agents {
        return Err(Error::ControlCount {
            expected: agents,
            got: nets.len(),
        });
    }
    Ok(())
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    let file = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    Ok(csv::Writer::from_writer(BufWriter::new(file)))
}

fn csv_io(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::io(format!("writing {}", path.display()), std::io::Error::other(e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub lengths: Vec<u64>,
    /// `returns[episode][agent]`
    pub returns: Vec<Vec<f64>>,
}

impl EvalSummary {
    pub fn mean_length(&self) -> f64 {
        self.lengths.iter().sum::<u64>() as f64 / self.lengths.len().max(1) as f64
    }

    pub fn mean_returns(&self) -> Vec<f64> {
        let n = self.returns.first().map_or(0, Vec::len);
        (0..n)
            .map(|i| self.returns.iter().map(|r| r[i]).sum::<f64>() / self.returns.len() as f64)
            .collect()
    }
}

/// Runs `episodes` greedy episodes (no exploration, no dropout, no learning)
/// from start states drawn with `seed`.
pub fn evaluate(nets: &[NafNetwork], config: &RunConfig, episodes: u64, seed: u64) -> Result<EvalSummary> {
    check_agents(nets, config)?;
    let mut env = CartPole::new(config.physics, config.reward.clone(), config.reset, config.train.max_steps);
    let mut rng = stream_rng(seed, 0);
    let mut summary = EvalSummary {
        lengths: Vec::new(),
        returns: Vec::new(),
    };
    for _ in 0..episodes {
        env.reset(&mut rng);
        let mut returns = vec![0.0; nets.len()];
        let mut length = 0;
        loop {
            let x = env.state().to_vec();
            let u: Vec<f64> = nets.iter().map(|n| n.greedy_control(&x)).collect();
            let out = env.step(&u)?;
            length += 1;
            returns.iter_mut().zip(&out.rewards).for_each(|(a, r)| *a += r);
            if out.terminated {
                break;
            }
        }
        summary.lengths.push(length);
        summary.returns.push(returns);
    }
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceGrid {
    pub s_min: f64,
    pub s_max: f64,
    pub s_count: usize,
    pub theta_min: f64,
    pub theta_max: f64,
    pub theta_count: usize,
    /// Points per velocity axis to average over; 0 evaluates at zero velocity.
    pub velocity_samples: usize,
    /// Velocities are averaged over `[-velocity_range, velocity_range]`.
    pub velocity_range: f64,
}

impl Default for SurfaceGrid {
    fn default() -> Self {
        Self {
            s_min: -2.4,
            s_max: 2.4,
            s_count: 49,
            theta_min: -0.21,
            theta_max: 0.21,
            theta_count: 43,
            velocity_samples: 5,
            velocity_range: 1.0,
        }
    }
}

pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfacePoint {
    pub s: f64,
    pub theta: f64,
    pub value: f64,
}

/// `V(s, theta)` averaged over a velocity grid.
pub fn value_surface(net: &NafNetwork, grid: &SurfaceGrid) -> Result<Vec<SurfacePoint>> {
    if grid.s_count == 0 || grid.theta_count == 0 {
        return Err(Error::config("grid", "s and theta need at least one point each"));
    }
    let velocities = if grid.velocity_samples == 0 {
        vec![0.0]
    } else {
        linspace(-grid.velocity_range, grid.velocity_range, grid.velocity_samples)
    };
    let mut points = Vec::with_capacity(grid.s_count * grid.theta_count);
    for s in linspace(grid.s_min, grid.s_max, grid.s_count) {
        for theta in linspace(grid.theta_min, grid.theta_max, grid.theta_count) {
            let mut total = 0.0;
            for &s_dot in &velocities {
                for &theta_dot in &velocities {
                    total += net.value(&[s, s_dot, theta, theta_dot]);
                }
            }
            let value = total / (velocities.len() * velocities.len()) as f64;
            points.push(SurfacePoint { s, theta, value });
        }
    }
    Ok(points)
}

pub fn write_value_surface(path: &Path, points: &[SurfacePoint]) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_io(path);
    w.write_record(["s", "theta", "value"]).map_err(&err)?;
    for p in points {
        w.write_record([p.s.to_string(), p.theta.to_string(), p.value.to_string()]).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: u64,
    pub state: StateVec,
    /// Controls and rewards of the step that produced `state`; empty for the
    /// initial row.
    pub controls: Vec<f64>,
    pub rewards: Vec<f64>,
    pub terminated: bool,
}

/// Greedy rollout of at most `steps` steps from `initial`.
pub fn rollout_greedy(nets: &[NafNetwork], config: &RunConfig, initial: StateVec, steps: u64) -> Result<Vec<TrajectoryRow>> {
    check_agents(nets, config)?;
    let mut env = CartPole::new(config.physics, config.reward.clone(), config.reset, steps);
    env.reset_to(CartPoleState::from_vec(initial, 0));
    let mut rows = vec![TrajectoryRow {
        step: 0,
        state: initial,
        controls: Vec::new(),
        rewards: Vec::new(),
        terminated: env.dynamics().failed(&initial),
    }];
    if rows[0].terminated {
        return Ok(rows);
    }
    for _ in 0..steps {
        let x = env.state().to_vec();
        let u: Vec<f64> = nets.iter().map(|n| n.greedy_control(&x)).collect();
        let out = env.step(&u)?;
        rows.push(TrajectoryRow {
            step: out.state.step_index,
            state: out.state.to_vec(),
            controls: u,
            rewards: out.rewards,
            terminated: out.terminated,
        });
        if out.terminated {
            break;
        }
    }
    Ok(rows)
}

pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow], agents: usize) -> Result<()> {
    let mut w = csv_writer(path)?;
    let err = csv_io(path);
    let mut header: Vec<String> = ["step", "s", "s_dot", "theta", "theta_dot"].map(String::from).to_vec();
    header.extend((0..agents).map(|i| format!("u_{i}")));
    header.extend((0..agents).map(|i| format!("r_{i}")));
    header.push("terminated".into());
    w.write_record(&header).map_err(&err)?;
    for row in rows {
        let mut rec = vec![row.step.to_string()];
        rec.extend(row.state.iter().map(f64::to_string));
        for values in [&row.controls, &row.rewards] {
            if values.is_empty() {
                rec.extend(std::iter::repeat_n(String::new(), agents));
            } else {
                rec.extend(values.iter().map(f64::to_string));
            }
        }
        rec.push(u8::from(row.terminated).to_string());
        w.write_record(&rec).map_err(&err)?;
    }
    w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qnet::NetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn nets() -> Vec<NafNetwork> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..2).map(|_| NafNetwork::with_hidden(&NetConfig::default(), &[8], 10.0, &mut rng)).collect()
    }

    #[test]
    fn linspace_endpoints() {
        assert_eq!(linspace(-1.0, 1.0, 5), vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
        assert_eq!(linspace(0.0, 1.0, 1), vec![0.5]);
        assert!(linspace(0.0, 1.0, 0).is_empty());
    }

    #[test]
    fn surface_shape_and_zero_velocity_mode() {
        let net = &nets()[0];
        let grid = SurfaceGrid {
            s_count: 3,
            theta_count: 4,
            velocity_samples: 0,
            ..SurfaceGrid::default()
        };
        let pts = value_surface(net, &grid).unwrap();
        assert!(value_surface(net, &SurfaceGrid { s_count: 0, ..grid }).is_err());
        assert_eq!(pts.len(), 12);
        assert_eq!(pts[0].value, net.value(&[-2.4, 0.0, -0.21, 0.0]));
        let averaged = value_surface(net, &SurfaceGrid { velocity_samples: 3, ..grid }).unwrap();
        let mut total = 0.0;
        for sd in [-1.0, 0.0, 1.0] {
            for td in [-1.0, 0.0, 1.0] {
                total += net.value(&[-2.4, sd, -0.21, td]);
            }
        }
        assert!((averaged[0].value - total / 9.0).abs() < 1e-12);
    }

    #[test]
    fn trajectory_rows_are_consistent() {
        let nets = nets();
        let config = RunConfig::default();
        let rows = rollout_greedy(&nets, &config, [0.0, 0.0, 0.05, 0.0], 30).unwrap();
        assert!(rows.len() <= 31);
        assert!(rows[0].controls.is_empty());
        for pair in rows.windows(2) {
            let env = CartPole::new(config.physics, config.reward.clone(), config.reset, 30);
            let next = env.dynamics().transition(&pair[0].state, &pair[1].controls);
            assert_eq!(next, pair[1].state);
        }
        assert!(rows.iter().rev().skip(1).all(|r| !r.terminated));
    }

    #[test]
    fn evaluation_is_deterministic() {
        let nets = nets();
        let mut config = RunConfig::default();
        config.train.max_steps = 200;
        let a = evaluate(&nets, &config, 4, 1).unwrap();
        assert_eq!(a, evaluate(&nets, &config, 4, 1).unwrap());
        assert_eq!(a.lengths.len(), 4);
        assert!(evaluate(&nets[..1], &config, 1, 1).is_err());
    }
}
