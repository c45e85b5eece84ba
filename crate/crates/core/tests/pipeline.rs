use impactq::env::{CartPoleState, PhysicsParams};
use impactq::export::{evaluate, rollout_greedy, value_surface, SurfaceGrid};
use impactq::qnet::{NafNetwork, NetConfig};
use impactq::trainer::{train, Trainer, METRICS_FILE};
use impactq::RunConfig;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(dir: &std::path::Path) -> RunConfig {
    let mut c = RunConfig::default();
    c.network.hidden_units = 8;
    c.replay.macro_batch = 16;
    c.replay.mini_batch = 8;
    c.train.episodes = 4;
    c.train.max_steps = 40;
    c.train.checkpoint_every = 2;
    c.output_dir = dir.to_path_buf();
    c
}

#[test]
fn single_short_episode_logs_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.train.episodes = 1;
    c.train.max_steps = 5;
    let summary = train(&c).unwrap();
    assert_eq!(summary.episodes.len(), 1);
    let log = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    assert_eq!(log.lines().count(), 2);
}

#[test]
fn periodic_checkpoints_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let summary = train(&c).unwrap();
    assert!(dir.path().join("checkpoints/agent0_ep2.ckpt").exists());
    assert!(dir.path().join("checkpoints/agent1_ep2.ckpt").exists());
    assert_eq!(summary.final_checkpoints.len(), 2);
    let (net, meta) = NafNetwork::load(&summary.final_checkpoints[1]).unwrap();
    assert_eq!((meta.agent, meta.episode), (1, 4));
    assert!((meta.epsilon - 0.999f64.powi(4)).abs() < 1e-12);
    assert_eq!(net.hidden(), &[8, 8, 8]);
    assert_eq!(RunConfig::load(&dir.path().join("config.toml")).unwrap(), c);
}

#[test]
fn epsilon_is_monotone_and_floored() {
    let dir = tempfile::tempdir().unwrap();
    let mut c = small(dir.path());
    c.train.decay = 0.5;
    c.train.eps_min = 0.2;
    c.train.episodes = 6;
    c.train.max_steps = 10;
    let summary = train(&c).unwrap();
    let eps: Vec<f64> = summary.episodes.iter().map(|m| m.epsilons[0]).collect();
    assert_eq!(eps, vec![1.0, 0.5, 0.25, 0.2, 0.2, 0.2]);
}

#[test]
fn decentralized_updates_leave_partner_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let mut t = Trainer::new(small(dir.path())).unwrap();
    t.run_episode().unwrap();
    t.run_episode().unwrap();
    let own_before = t.agents()[0].net.params().to_vec();
    let before = t.agents()[1].net.params().to_vec();
    let memory_len = t.agents()[1].memory.len();
    let train_cfg = t.config().train.clone();
    let replay = t.config().replay;
    let k = t.global_step();
    t.agents_mut()[0].learn(k, &replay, &train_cfg).unwrap();
    assert_eq!(t.agents()[1].net.params(), &before[..]);
    assert_eq!(t.agents()[1].memory.len(), memory_len);
    assert_ne!(t.agents()[0].net.params(), &own_before[..]);
}

#[test]
fn eval_from_trained_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let c = small(dir.path());
    let summary = train(&c).unwrap();
    let nets: Vec<NafNetwork> = summary
        .final_checkpoints
        .iter()
        .map(|p| NafNetwork::load_expecting(p, &c.network.hidden_sizes()).unwrap().0)
        .collect();
    let a = evaluate(&nets, &c, 3, 11).unwrap();
    assert_eq!(a, evaluate(&nets, &c, 3, 11).unwrap());
    let grid = SurfaceGrid { s_count: 1, theta_count: 1, s_min: 0.3, s_max: 0.3, theta_min: 0.01, theta_max: 0.01, velocity_samples: 0, ..SurfaceGrid::default() };
    let pts = value_surface(&nets[0], &grid).unwrap();
    assert_eq!(pts[0].value, nets[0].heads(&[0.3, 0.0, 0.01, 0.0]).v);
}

#[test]
fn zero_policy_holds_equilibrium() {
    let c = RunConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let nets: Vec<NafNetwork> = (0..2)
        .map(|_| {
            let mut net = NafNetwork::with_hidden(&NetConfig::default(), &[4], PhysicsParams::default().u_max, &mut rng);
            net.params_mut().fill(0.0);
            net
        })
        .collect();
    let rows = rollout_greedy(&nets, &c, CartPoleState::default().to_vec(), 50).unwrap();
    assert_eq!(rows.len(), 51);
    assert!(rows.iter().all(|r| r.state == [0.0; 4]));
    assert!(rows.last().unwrap().terminated);
}

#[test]
fn shipped_configs_load() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let default = RunConfig::load(&root.join("default.toml")).unwrap();
    assert_eq!(default, RunConfig::default());
    let short = RunConfig::load(&root.join("short-target-period.toml")).unwrap();
    assert_eq!((short.train.episodes, short.train.max_steps, short.train.target_period), (300, 500, 250));
}
