//! C ABI for the impactq crate.
//!
//! Objects are opaque handles created by `*_new`/`*_load` and released with
//! the matching `*_free`. Every fallible call returns an [`IqStatus`]; on
//! failure [`iq_last_error`] describes the most recent error of the calling
//! thread. Handles are not thread-safe; use one handle per thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use impactq::env::{CartPole, CartPoleState};
use impactq::impact::{self, ImpactParams, Tier};
use impactq::qnet::NafNetwork;
use impactq::replay;
use impactq::trainer::{stream_rng, Trainer};
use impactq::{Error, RunConfig};
use rand_chacha::ChaCha8Rng;

/// Status codes returned by every fallible function.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IqStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    EpisodeTerminated = 3,
    ControlCount = 4,
    ControlOutOfRange = 5,
    AgentIndex = 6,
    InsufficientExperiences = 7,
    Divergence = 8,
    Config = 9,
    ShapeMismatch = 10,
    Format = 11,
    Io = 12,
    Panic = 13,
}

impl From<&Error> for IqStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::EpisodeTerminated => IqStatus::EpisodeTerminated,
            Error::ControlCount { .. } => IqStatus::ControlCount,
            Error::ControlOutOfRange { .. } => IqStatus::ControlOutOfRange,
            Error::AgentIndex { .. } => IqStatus::AgentIndex,
            Error::InsufficientExperiences { .. } => IqStatus::InsufficientExperiences,
            Error::Divergence(_) => IqStatus::Divergence,
            Error::Config { .. } => IqStatus::Config,
            Error::ShapeMismatch(_) => IqStatus::ShapeMismatch,
            Error::Format { .. } => IqStatus::Format,
            Error::Io { .. } => IqStatus::Io,
        }
    }
}

/// Impact tier of a sampled experience.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IqTier {
    High = 0,
    MidCoop = 1,
    MidConflict = 2,
    Low = 3,
}

impl From<Tier> for IqTier {
    fn from(t: Tier) -> Self {
        match t {
            Tier::High => IqTier::High,
            Tier::MidCoop => IqTier::MidCoop,
            Tier::MidConflict => IqTier::MidConflict,
            Tier::Low => IqTier::Low,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqImpactParams {
    pub lambda_high: f64,
    pub lambda_low: f64,
    pub alpha: f64,
    pub sigma: f64,
    pub beta: f64,
}

impl From<IqImpactParams> for ImpactParams {
    fn from(p: IqImpactParams) -> Self {
        ImpactParams {
            lambda_high: p.lambda_high,
            lambda_low: p.lambda_low,
            alpha: p.alpha,
            sigma: p.sigma,
            beta: p.beta,
        }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqTierChoice {
    pub tier: IqTier,
    pub lr: f64,
    pub simulate_coordination: bool,
}

/// Summary of one training episode.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IqEpisodeSummary {
    pub episode: u64,
    pub length: u64,
    pub epsilon: f64,
}

/// Opaque cart-pole environment.
pub struct IqEnv {
    env: CartPole,
    rng: ChaCha8Rng,
}

/// Opaque single-agent greedy policy loaded from a checkpoint.
pub struct IqPolicy {
    net: NafNetwork,
}

/// Opaque multi-agent trainer.
pub struct IqTrainer {
    trainer: Trainer,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(message: String) {
    let c = CString::new(message.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn fail(status: IqStatus, message: impl Into<String>) -> IqStatus {
    set_error(message.into());
    status
}

fn from_error(e: Error) -> IqStatus {
    let status = IqStatus::from(&e);
    set_error(e.to_string());
    status
}

fn guard(f: impl FnOnce() -> IqStatus) -> IqStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(status) => status,
        Err(_) => fail(IqStatus::Panic, "internal panic"),
    }
}

unsafe fn slice<'a, T>(ptr: *const T, len: usize) -> Option<&'a [T]> {
    if len == 0 {
        Some(&[])
    } else if ptr.is_null() {
        None
    } else {
        Some(std::slice::from_raw_parts(ptr, len))
    }
}

unsafe fn state_arg(x: *const f64) -> Option<[f64; 4]> {
    if x.is_null() {
        None
    } else {
        Some(*(x as *const [f64; 4]))
    }
}

unsafe fn str_arg<'a>(s: *const c_char) -> Result<&'a str, IqStatus> {
    if s.is_null() {
        return Err(fail(IqStatus::NullPointer, "null string"));
    }
    CStr::from_ptr(s)
        .to_str()
        .map_err(|_| fail(IqStatus::InvalidArgument, "string is not valid UTF-8"))
}

unsafe fn config_arg(toml: *const c_char) -> Result<RunConfig, IqStatus> {
    if toml.is_null() {
        return Ok(RunConfig::default());
    }
    RunConfig::from_toml_str(str_arg(toml)?).map_err(from_error)
}

/// Message of the last error on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn iq_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn iq_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Creates an environment from a TOML run config (NULL for defaults). Reset
/// states are drawn from `seed`.
///
/// # Safety
/// `config_toml` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iq_env_new(config_toml: *const c_char, seed: u64, out: *mut *mut IqEnv) -> IqStatus {
    guard(|| {
        if out.is_null() {
            return fail(IqStatus::NullPointer, "out is null");
        }
        let config = match config_arg(config_toml) {
            Ok(c) => c,
            Err(s) => return s,
        };
        let env = CartPole::new(config.physics, config.reward, config.reset, config.train.max_steps);
        *out = Box::into_raw(Box::new(IqEnv {
            env,
            rng: stream_rng(seed, 0),
        }));
        IqStatus::Ok
    })
}

/// # Safety
/// `env` is NULL or a handle from [`iq_env_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn iq_env_free(env: *mut IqEnv) {
    if !env.is_null() {
        drop(Box::from_raw(env));
    }
}

/// Number of agents, or 0 for a NULL handle.
///
/// # Safety
/// `env` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iq_env_agents(env: *const IqEnv) -> usize {
    env.as_ref().map_or(0, |e| e.env.agents())
}

/// Samples a start state and writes it to `state_out` (4 doubles, may be NULL).
///
/// # Safety
/// `env` is a live handle; `state_out` is NULL or holds 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn iq_env_reset(env: *mut IqEnv, state_out: *mut f64) -> IqStatus {
    guard(|| {
        let Some(e) = env.as_mut() else {
            return fail(IqStatus::NullPointer, "env is null");
        };
        let s = e.env.reset(&mut e.rng);
        if !state_out.is_null() {
            *(state_out as *mut [f64; 4]) = s.to_vec();
        }
        IqStatus::Ok
    })
}

/// Resets to the given state `[s, s_dot, theta, theta_dot]`.
///
/// # Safety
/// `env` is a live handle; `state` holds 4 doubles.
#[no_mangle]
pub unsafe extern "C" fn iq_env_reset_to(env: *mut IqEnv, state: *const f64) -> IqStatus {
    guard(|| {
        let Some(e) = env.as_mut() else {
            return fail(IqStatus::NullPointer, "env is null");
        };
        let Some(x) = state_arg(state) else {
            return fail(IqStatus::NullPointer, "state is null");
        };
        if x.iter().any(|v| !v.is_finite()) {
            return fail(IqStatus::InvalidArgument, "state must be finite");
        }
        e.env.reset_to(CartPoleState::from_vec(x, 0));
        IqStatus::Ok
    })
}

/// Applies one control per agent. Writes the next state (4 doubles), one
/// reward per agent and the termination flag; any output may be NULL.
///
/// # Safety
/// `env` is a live handle; `controls` holds `n_controls` doubles;
/// `rewards_out` holds `n_controls` doubles when not NULL.
#[no_mangle]
pub unsafe extern "C" fn iq_env_step(
    env: *mut IqEnv,
    controls: *const f64,
    n_controls: usize,
    state_out: *mut f64,
    rewards_out: *mut f64,
    terminated_out: *mut bool,
) -> IqStatus {
    guard(|| {
        let Some(e) = env.as_mut() else {
            return fail(IqStatus::NullPointer, "env is null");
        };
        let Some(u) = slice(controls, n_controls) else {
            return fail(IqStatus::NullPointer, "controls is null");
        };
        let out = match e.env.step(u) {
            Ok(o) => o,
            Err(err) => return from_error(err),
        };
        if !state_out.is_null() {
            *(state_out as *mut [f64; 4]) = out.state.to_vec();
        }
        if !rewards_out.is_null() {
            ptr::copy_nonoverlapping(out.rewards.as_ptr(), rewards_out, out.rewards.len());
        }
        if !terminated_out.is_null() {
            *terminated_out = out.terminated;
        }
        IqStatus::Ok
    })
}

/// Current state (4 doubles) and step index.
///
/// # Safety
/// `env` is a live handle; `state_out` holds 4 doubles; `step_out` may be NULL.
#[no_mangle]
pub unsafe extern "C" fn iq_env_state(env: *const IqEnv, state_out: *mut f64, step_out: *mut u64) -> IqStatus {
    guard(|| {
        let Some(e) = env.as_ref() else {
            return fail(IqStatus::NullPointer, "env is null");
        };
        if state_out.is_null() {
            return fail(IqStatus::NullPointer, "state_out is null");
        }
        let s = e.env.state();
        *(state_out as *mut [f64; 4]) = s.to_vec();
        if !step_out.is_null() {
            *step_out = s.step_index;
        }
        IqStatus::Ok
    })
}

/// Default impact-tier thresholds and learning rates.
#[no_mangle]
pub extern "C" fn iq_impact_params_default() -> IqImpactParams {
    let p = ImpactParams::default();
    IqImpactParams {
        lambda_high: p.lambda_high,
        lambda_low: p.lambda_low,
        alpha: p.alpha,
        sigma: p.sigma,
        beta: p.beta,
    }
}

/// `|u_agent| / sum_j |u_j|`.
///
/// # Safety
/// `u_joint` holds `n` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iq_impact_factor(agent: usize, u_joint: *const f64, n: usize, out: *mut f64) -> IqStatus {
    guard(|| {
        let (Some(u), false) = (slice(u_joint, n), out.is_null()) else {
            return fail(IqStatus::NullPointer, "null argument");
        };
        match impact::impact_factor(agent, u) {
            Ok(v) => {
                *out = v;
                IqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Sign of the agent's control times the partners' mean control.
///
/// # Safety
/// `u_joint` holds `n` doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iq_coordination_coefficient(agent: usize, u_joint: *const f64, n: usize, out: *mut i8) -> IqStatus {
    guard(|| {
        let (Some(u), false) = (slice(u_joint, n), out.is_null()) else {
            return fail(IqStatus::NullPointer, "null argument");
        };
        match impact::coordination_coefficient(agent, u) {
            Ok(v) => {
                *out = v;
                IqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// Tier and learning rate for impact factor `lambda` and coefficient `psi`.
/// `params` may be NULL for the defaults.
///
/// # Safety
/// `params` is NULL or readable; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iq_select_tier(lambda: f64, psi: i8, params: *const IqImpactParams, out: *mut IqTierChoice) -> IqStatus {
    guard(|| {
        if out.is_null() {
            return fail(IqStatus::NullPointer, "out is null");
        }
        let p: ImpactParams = params.as_ref().map_or_else(ImpactParams::default, |p| (*p).into());
        if let Err(e) = p.validate() {
            return from_error(e);
        }
        if !(0.0..=1.0).contains(&lambda) || !(-1..=1).contains(&psi) {
            return fail(IqStatus::InvalidArgument, "lambda must lie in [0, 1] and psi in {-1, 0, 1}");
        }
        let c = impact::select_tier(lambda, psi, &p);
        *out = IqTierChoice {
            tier: c.tier.into(),
            lr: c.lr,
            simulate_coordination: c.simulate_coordination,
        };
        IqStatus::Ok
    })
}

/// Stage-1 macro-batch size `round((B - t)(1 - eps) + t)`.
///
/// # Safety
/// `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iq_macro_batch_size(macro_batch: usize, mini_batch: usize, eps: f64, out: *mut usize) -> IqStatus {
    guard(|| {
        if out.is_null() {
            return fail(IqStatus::NullPointer, "out is null");
        }
        if mini_batch == 0 || mini_batch > macro_batch || !(0.0..=1.0).contains(&eps) {
            return fail(IqStatus::InvalidArgument, "need 0 < mini_batch <= macro_batch and eps in [0, 1]");
        }
        *out = replay::macro_batch_size(macro_batch, mini_batch, eps);
        IqStatus::Ok
    })
}

/// Temporal priority of an experience collected at `k_c`, seen at `k_now`.
#[no_mangle]
pub extern "C" fn iq_temporal_priority(k_now: u64, k_c: u64, xi: f64) -> f64 {
    replay::temporal_priority(k_now, k_c, xi)
}

/// Loads one agent's network checkpoint.
///
/// # Safety
/// `path` is a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iq_policy_load(path: *const c_char, out: *mut *mut IqPolicy) -> IqStatus {
    guard(|| {
        if out.is_null() {
            return fail(IqStatus::NullPointer, "out is null");
        }
        let path = match str_arg(path) {
            Ok(p) => PathBuf::from(p),
            Err(s) => return s,
        };
        match NafNetwork::load(&path) {
            Ok((net, _)) => {
                *out = Box::into_raw(Box::new(IqPolicy { net }));
                IqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `policy` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iq_policy_free(policy: *mut IqPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

unsafe fn policy_eval(policy: *const IqPolicy, state: *const f64, out: *mut f64, f: impl FnOnce(&NafNetwork, &[f64; 4]) -> f64) -> IqStatus {
    guard(|| {
        let (Some(p), Some(x), false) = (policy.as_ref(), state_arg(state), out.is_null()) else {
            return fail(IqStatus::NullPointer, "null argument");
        };
        *out = f(&p.net, &x);
        IqStatus::Ok
    })
}

/// Greedy control `clamp(mu(x))`.
///
/// # Safety
/// `policy` is a live handle; `state` holds 4 doubles; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iq_policy_greedy_control(policy: *const IqPolicy, state: *const f64, out: *mut f64) -> IqStatus {
    policy_eval(policy, state, out, |n, x| n.greedy_control(x))
}

/// State value `V(x) = max_u Q(x, u)`.
///
/// # Safety
/// As [`iq_policy_greedy_control`].
#[no_mangle]
pub unsafe extern "C" fn iq_policy_value(policy: *const IqPolicy, state: *const f64, out: *mut f64) -> IqStatus {
    policy_eval(policy, state, out, |n, x| n.value(x))
}

/// `Q(x, u)`.
///
/// # Safety
/// As [`iq_policy_greedy_control`].
#[no_mangle]
pub unsafe extern "C" fn iq_policy_q_value(policy: *const IqPolicy, state: *const f64, u: f64, out: *mut f64) -> IqStatus {
    policy_eval(policy, state, out, |n, x| n.q_value(x, u))
}

/// Creates a trainer from a TOML run config (NULL for defaults).
///
/// # Safety
/// `config_toml` is NULL or a NUL-terminated string; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn iq_trainer_new(config_toml: *const c_char, out: *mut *mut IqTrainer) -> IqStatus {
    guard(|| {
        if out.is_null() {
            return fail(IqStatus::NullPointer, "out is null");
        }
        let config = match config_arg(config_toml) {
            Ok(c) => c,
            Err(s) => return s,
        };
        match Trainer::new(config) {
            Ok(trainer) => {
                *out = Box::into_raw(Box::new(IqTrainer { trainer }));
                IqStatus::Ok
            }
            Err(e) => from_error(e),
        }
    })
}

/// # Safety
/// `trainer` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn iq_trainer_free(trainer: *mut IqTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// Runs one training episode. `returns_out` (may be NULL) receives
/// `n_returns` per-agent returns; `n_returns` must equal the agent count.
///
/// # Safety
/// `trainer` is a live handle; `summary_out` is NULL or writable;
/// `returns_out` is NULL or holds `n_returns` doubles.
#[no_mangle]
pub unsafe extern "C" fn iq_trainer_run_episode(
    trainer: *mut IqTrainer,
    summary_out: *mut IqEpisodeSummary,
    returns_out: *mut f64,
    n_returns: usize,
) -> IqStatus {
    guard(|| {
        let Some(t) = trainer.as_mut() else {
            return fail(IqStatus::NullPointer, "trainer is null");
        };
        let agents = t.trainer.agents().len();
        if !returns_out.is_null() && n_returns != agents {
            return fail(IqStatus::InvalidArgument, format!("returns buffer holds {n_returns}, need {agents}"));
        }
        let m = match t.trainer.run_episode() {
            Ok(m) => m,
            Err(e) => return from_error(e),
        };
        if !summary_out.is_null() {
            *summary_out = IqEpisodeSummary {
                episode: m.episode,
                length: m.length,
                epsilon: m.epsilons[0],
            };
        }
        if !returns_out.is_null() {
            ptr::copy_nonoverlapping(m.returns.as_ptr(), returns_out, agents);
        }
        IqStatus::Ok
    })
}

/// Writes `agent<i>.ckpt` for every agent into `dir`.
///
/// # Safety
/// `trainer` is a live handle; `dir` is a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn iq_trainer_save(trainer: *const IqTrainer, dir: *const c_char) -> IqStatus {
    guard(|| {
        let Some(t) = trainer.as_ref() else {
            return fail(IqStatus::NullPointer, "trainer is null");
        };
        let dir = match str_arg(dir) {
            Ok(d) => PathBuf::from(d),
            Err(s) => return s,
        };
        match t.trainer.save_checkpoints(&dir, "") {
            Ok(_) => IqStatus::Ok,
            Err(e) => from_error(e),
        }
    })
}
