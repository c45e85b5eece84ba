//! Command-line interface. `run` returns the process exit code: 0 on
//! success, 1 on runtime failure, 2 on usage or configuration errors.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::export::{evaluate, rollout_greedy, value_surface, write_trajectory, write_value_surface, SurfaceGrid};
use crate::qnet::NafNetwork;
use crate::trainer::train;

pub const OUTPUT_ROOT_VAR: &str = "IMPACTQ_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "impactq", version, about = "Decentralized impact-tiered Q-learning on a two-agent cart-pole")]
pub struct Cli {
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train all agents.
    Train(TrainArgs),
    /// Evaluate greedy policies from checkpoints.
    Eval(EvalArgs),
    /// Write V(s, theta) of one agent as CSV.
    ExportValueSurface(SurfaceArgs),
    /// Write a greedy rollout as CSV.
    ExportTrajectory(TrajectoryArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// TOML config file, or `default`.
    #[arg(long, default_value = "default")]
    pub config: String,
}

impl ConfigArg {
    pub fn load(&self) -> Result<RunConfig> {
        if self.config == "default" {
            Ok(RunConfig::default())
        } else {
            RunConfig::load(Path::new(&self.config))
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long)]
    pub episodes: Option<u64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Train one run per seed in parallel, each in `<out>/seed<N>`.
    #[arg(long, value_delimiter = ',', conflicts_with = "seed")]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub eps_min: Option<f64>,
    #[arg(long)]
    pub per_sample_updates: bool,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    /// One checkpoint per agent, in agent order.
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub episodes: u64,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Also write the summary as JSON.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SurfaceArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 49)]
    pub s_count: usize,
    #[arg(long, default_value_t = 43)]
    pub theta_count: usize,
    /// Velocity grid points per axis; 0 uses zero velocities.
    #[arg(long, default_value_t = 5)]
    pub velocity_samples: usize,
}

#[derive(Debug, Args)]
pub struct TrajectoryArgs {
    #[command(flatten)]
    pub config: ConfigArg,
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoints: Vec<PathBuf>,
    /// Initial state `s,s_dot,theta,theta_dot`.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true, default_value = "0,0,0.05,0")]
    pub initial: Vec<f64>,
    #[arg(long, default_value_t = 500)]
    pub steps: u64,
    #[arg(long)]
    pub out: PathBuf,
}

fn resolve_output(path: &Path) -> PathBuf {
    match std::env::var_os(OUTPUT_ROOT_VAR) {
        Some(root) if path.is_relative() => PathBuf::from(root).join(path),
        _ => path.to_path_buf(),
    }
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config { .. } => 2,
        _ => 1,
    }
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).parse_env("IMPACTQ_LOG").try_init();
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
        Command::ExportValueSurface(args) => cmd_surface(args),
        Command::ExportTrajectory(args) => cmd_trajectory(args),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let mut config = args.config.load()?;
    if let Some(v) = args.episodes {
        config.train.episodes = v;
    }
    if let Some(v) = args.steps {
        config.train.max_steps = v;
    }
    if let Some(v) = args.seed {
        config.seed = v;
    }
    if let Some(v) = args.eps_min {
        config.train.eps_min = v;
    }
    if args.per_sample_updates {
        config.train.per_sample_updates = true;
    }
    if let Some(out) = &args.out {
        config.output_dir = out.clone();
    }
    config.output_dir = resolve_output(&config.output_dir);
    config.validate()?;

    if args.seeds.is_empty() {
        let summary = train(&config)?;
        report(&summary);
        return Ok(());
    }
    let configs: Vec<RunConfig> = args
        .seeds
        .iter()
        .map(|&seed| {
            let mut c = config.clone();
            c.seed = seed;
            c.output_dir = config.output_dir.join(format!("seed{seed}"));
            c
        })
        .collect();
    let results: Vec<Result<_>> = std::thread::scope(|scope| {
        let handles: Vec<_> = configs.iter().map(|c| scope.spawn(move || train(c))).collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::Divergence("training thread panicked".into()))))
            .collect()
    });
    let mut first_err = None;
    for (seed, result) in args.seeds.iter().zip(results) {
        match result {
            Ok(summary) => report(&summary),
            Err(e) => {
                eprintln!("seed {seed}: {e}");
                first_err.get_or_insert(e);
            }
        }
    }
    first_err.map_or(Ok(()), Err)
}

fn report(summary: &crate::trainer::RunSummary) {
    let tail = &summary.episodes[summary.episodes.len().saturating_sub(50)..];
    let mean_len = tail.iter().map(|m| m.length as f64).sum::<f64>() / tail.len().max(1) as f64;
    println!(
        "{}: {} episodes, mean length of last {} = {:.1}",
        summary.output_dir.display(),
        summary.episodes.len(),
        tail.len(),
        mean_len
    );
}

fn load_nets(paths: &[PathBuf], config: &RunConfig) -> Result<Vec<NafNetwork>> {
    let hidden = config.network.hidden_sizes();
    paths
        .iter()
        .map(|p| NafNetwork::load_expecting(p, &hidden).map(|(net, _)| net))
        .collect()
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let mut config = args.config.load()?;
    if let Some(v) = args.steps {
        config.train.max_steps = v;
        config.validate()?;
    }
    let nets = load_nets(&args.checkpoints, &config)?;
    let summary = evaluate(&nets, &config, args.episodes, args.seed)?;
    println!("episodes {}", summary.lengths.len());
    println!("mean_length {:.3}", summary.mean_length());
    let mean_returns = summary.mean_returns();
    for (i, r) in mean_returns.iter().enumerate() {
        println!("mean_return_{i} {r:.3}");
    }
    if let Some(out) = args.out {
        let out = resolve_output(&out);
        let json = serde_json::json!({
            "episodes": summary.lengths.len(),
            "seed": args.seed,
            "mean_length": summary.mean_length(),
            "mean_returns": mean_returns,
            "lengths": summary.lengths,
            "checkpoints": args.checkpoints,
        });
        let text = serde_json::to_string_pretty(&json).expect("summary serializes");
        std::fs::write(&out, text + "\n").map_err(|e| Error::io(format!("writing {}", out.display()), e))?;
    }
    Ok(())
}

fn cmd_surface(args: SurfaceArgs) -> Result<()> {
    let (net, _) = NafNetwork::load(&args.checkpoint)?;
    let grid = SurfaceGrid {
        s_count: args.s_count,
        theta_count: args.theta_count,
        velocity_samples: args.velocity_samples,
        ..SurfaceGrid::default()
    };
    let out = resolve_output(&args.out);
    write_value_surface(&out, &value_surface(&net, &grid)?)
}

fn cmd_trajectory(args: TrajectoryArgs) -> Result<()> {
    let config = args.config.load()?;
    let nets = load_nets(&args.checkpoints, &config)?;
    let initial: [f64; 4] = args
        .initial
        .as_slice()
        .try_into()
        .map_err(|_| Error::config("initial", format!("expected 4 comma-separated values, got {}", args.initial.len())))?;
    if initial.iter().any(|v| !v.is_finite()) {
        return Err(Error::config("initial", "values must be finite"));
    }
    let rows = rollout_greedy(&nets, &config, initial, args.steps)?;
    let out = resolve_output(&args.out);
    write_trajectory(&out, &rows, nets.len())
}
