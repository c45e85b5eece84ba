#ifndef IMPACTQ_H
#define IMPACTQ_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum IqStatus {
  IQ_STATUS_OK = 0,
  IQ_STATUS_NULL_POINTER = 1,
  IQ_STATUS_INVALID_ARGUMENT = 2,
  IQ_STATUS_EPISODE_TERMINATED = 3,
  IQ_STATUS_CONTROL_COUNT = 4,
  IQ_STATUS_CONTROL_OUT_OF_RANGE = 5,
  IQ_STATUS_AGENT_INDEX = 6,
  IQ_STATUS_INSUFFICIENT_EXPERIENCES = 7,
  IQ_STATUS_DIVERGENCE = 8,
  IQ_STATUS_CONFIG = 9,
  IQ_STATUS_SHAPE_MISMATCH = 10,
  IQ_STATUS_FORMAT = 11,
  IQ_STATUS_IO = 12,
  IQ_STATUS_PANIC = 13,
} IqStatus;

// Impact tier of a sampled experience.
typedef enum IqTier {
  IQ_TIER_HIGH = 0,
  IQ_TIER_MID_COOP = 1,
  IQ_TIER_MID_CONFLICT = 2,
  IQ_TIER_LOW = 3,
} IqTier;

// Opaque cart-pole environment.
typedef struct IqEnv IqEnv;

// Opaque single-agent greedy policy loaded from a checkpoint.
typedef struct IqPolicy IqPolicy;

// Opaque multi-agent trainer.
typedef struct IqTrainer IqTrainer;

typedef struct IqImpactParams {
  double lambda_high;
  double lambda_low;
  double alpha;
  double sigma;
  double beta;
} IqImpactParams;

typedef struct IqTierChoice {
  enum IqTier tier;
  double lr;
  bool simulate_coordination;
} IqTierChoice;

// Summary of one training episode.
typedef struct IqEpisodeSummary {
  uint64_t episode;
  uint64_t length;
  double epsilon;
} IqEpisodeSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last error on this thread, or NULL. The pointer stays
// valid until the next failing call on the same thread.
const char *iq_last_error(void);

// Library version as a static NUL-terminated string.
const char *iq_version(void);

// Creates an environment from a TOML run config (NULL for defaults). Reset
// states are drawn from `seed`.
//
// # Safety
// `config_toml` is NULL or a NUL-terminated string; `out` is writable.
enum IqStatus iq_env_new(const char *config_toml, uint64_t seed, struct IqEnv **out);

// # Safety
// `env` is NULL or a handle from [`iq_env_new`] not yet freed.
void iq_env_free(struct IqEnv *env);

// Number of agents, or 0 for a NULL handle.
//
// # Safety
// `env` is NULL or a live handle.
size_t iq_env_agents(const struct IqEnv *env);

// Samples a start state and writes it to `state_out` (4 doubles, may be NULL).
//
// # Safety
// `env` is a live handle; `state_out` is NULL or holds 4 doubles.
enum IqStatus iq_env_reset(struct IqEnv *env, double *state_out);

// Resets to the given state `[s, s_dot, theta, theta_dot]`.
//
// # Safety
// `env` is a live handle; `state` holds 4 doubles.
enum IqStatus iq_env_reset_to(struct IqEnv *env, const double *state);

// Applies one control per agent. Writes the next state (4 doubles), one
// reward per agent and the termination flag; any output may be NULL.
//
// # Safety
// `env` is a live handle; `controls` holds `n_controls` doubles;
// `rewards_out` holds `n_controls` doubles when not NULL.
enum IqStatus iq_env_step(struct IqEnv *env,
                          const double *controls,
                          size_t n_controls,
                          double *state_out,
                          double *rewards_out,
                          bool *terminated_out);

// Current state (4 doubles) and step index.
//
// # Safety
// `env` is a live handle; `state_out` holds 4 doubles; `step_out` may be NULL.
enum IqStatus iq_env_state(const struct IqEnv *env, double *state_out, uint64_t *step_out);

// Default impact-tier thresholds and learning rates.
struct IqImpactParams iq_impact_params_default(void);

// `|u_agent| / sum_j |u_j|`.
//
// # Safety
// `u_joint` holds `n` doubles; `out` is writable.
enum IqStatus iq_impact_factor(size_t agent, const double *u_joint, size_t n, double *out);

// Sign of the agent's control times the partners' mean control.
//
// # Safety
// `u_joint` holds `n` doubles; `out` is writable.
enum IqStatus iq_coordination_coefficient(size_t agent,
                                          const double *u_joint,
                                          size_t n,
                                          int8_t *out);

// Tier and learning rate for impact factor `lambda` and coefficient `psi`.
// `params` may be NULL for the defaults.
//
// # Safety
// `params` is NULL or readable; `out` is writable.
enum IqStatus iq_select_tier(double lambda,
                             int8_t psi,
                             const struct IqImpactParams *params,
                             struct IqTierChoice *out);

// Stage-1 macro-batch size `round((B - t)(1 - eps) + t)`.
//
// # Safety
// `out` is writable.
enum IqStatus iq_macro_batch_size(size_t macro_batch, size_t mini_batch, double eps, size_t *out);

// Temporal priority of an experience collected at `k_c`, seen at `k_now`.
double iq_temporal_priority(uint64_t k_now, uint64_t k_c, double xi);

// Loads one agent's network checkpoint.
//
// # Safety
// `path` is a NUL-terminated string; `out` is writable.
enum IqStatus iq_policy_load(const char *path, struct IqPolicy **out);

// # Safety
// `policy` is NULL or a live handle.
void iq_policy_free(struct IqPolicy *policy);

// Greedy control `clamp(mu(x))`.
//
// # Safety
// `policy` is a live handle; `state` holds 4 doubles; `out` is writable.
enum IqStatus iq_policy_greedy_control(const struct IqPolicy *policy,
                                       const double *state,
                                       double *out);

// State value `V(x) = max_u Q(x, u)`.
//
// # Safety
// As [`iq_policy_greedy_control`].
enum IqStatus iq_policy_value(const struct IqPolicy *policy, const double *state, double *out);

// `Q(x, u)`.
//
// # Safety
// As [`iq_policy_greedy_control`].
enum IqStatus iq_policy_q_value(const struct IqPolicy *policy,
                                const double *state,
                                double u,
                                double *out);

// Creates a trainer from a TOML run config (NULL for defaults).
//
// # Safety
// `config_toml` is NULL or a NUL-terminated string; `out` is writable.
enum IqStatus iq_trainer_new(const char *config_toml, struct IqTrainer **out);

// # Safety
// `trainer` is NULL or a live handle.
void iq_trainer_free(struct IqTrainer *trainer);

// Runs one training episode. `returns_out` (may be NULL) receives
// `n_returns` per-agent returns; `n_returns` must equal the agent count.
//
// # Safety
// `trainer` is a live handle; `summary_out` is NULL or writable;
// `returns_out` is NULL or holds `n_returns` doubles.
enum IqStatus iq_trainer_run_episode(struct IqTrainer *trainer,
                                     struct IqEpisodeSummary *summary_out,
                                     double *returns_out,
                                     size_t n_returns);

// Writes `agent<i>.ckpt` for every agent into `dir`.
//
// # Safety
// `trainer` is a live handle; `dir` is a NUL-terminated string.
enum IqStatus iq_trainer_save(const struct IqTrainer *trainer, const char *dir);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IMPACTQ_H */
