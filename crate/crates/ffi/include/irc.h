#ifndef IRC_H
#define IRC_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every exported function.
typedef enum IrcStatus {
  IRC_STATUS_OK = 0,
  // A required pointer argument was null.
  IRC_STATUS_NULL_POINTER = 1,
  // An argument was out of range or not valid UTF-8.
  IRC_STATUS_INVALID_ARGUMENT = 2,
  // A configuration or model parameter was rejected.
  IRC_STATUS_CONFIG = 3,
  // Input text could not be parsed.
  IRC_STATUS_PARSE = 4,
  // A numerical routine failed (non-convergence, singular system).
  IRC_STATUS_NUMERICAL = 5,
  IRC_STATUS_IO = 6,
  // A Rust panic was caught at the boundary.
  IRC_STATUS_PANIC = 7,
} IrcStatus;

// Learnable agent parameters, in the library's canonical order.
typedef enum IrcParam {
  IRC_PARAM_APPEAR1 = 0,
  IRC_PARAM_APPEAR2 = 1,
  IRC_PARAM_DISAPPEAR1 = 2,
  IRC_PARAM_DISAPPEAR2 = 3,
  IRC_PARAM_Q_ABSENT = 4,
  IRC_PARAM_Q_PRESENT = 5,
  IRC_PARAM_PRESS_COST = 6,
  IRC_PARAM_TRAVEL_COST = 7,
  IRC_PARAM_GROOMING_REWARD = 8,
  IRC_PARAM_TEMPERATURE = 9,
  IRC_PARAM_DIFFUSION = 10,
} IrcParam;

// Run configuration: world, agent, solver and EM settings.
typedef struct IrcConfig IrcConfig;

// Result of a multi-start EM fit.
typedef struct IrcFit IrcFit;

// Solved belief MDP of an agent model.
typedef struct IrcSolution IrcSolution;

// Logged trajectory, optionally with simulation ground truth.
typedef struct IrcTrajectory IrcTrajectory;

// One logged step. Colors are -1 when not seen.
typedef struct IrcStep {
  uint32_t location;
  int32_t color1;
  int32_t color2;
  uint32_t reward;
  uint32_t action;
} IrcStep;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null if none.
// The pointer stays valid until the next failing call on the same thread.
const char *irc_last_error(void);

// Library version as a static nul-terminated string.
const char *irc_version(void);

// # Safety
// `s` must come from this library and not have been freed.
void irc_string_free(char *s);

// Reference configuration.
//
// # Safety
// `out` must be a valid pointer.
enum IrcStatus irc_config_new(struct IrcConfig **out);

// Parse a TOML configuration; missing fields take their defaults.
//
// # Safety
// `toml` must be a nul-terminated string and `out` a valid pointer.
enum IrcStatus irc_config_from_toml(const char *toml, struct IrcConfig **out);

// Fully resolved configuration as TOML.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_config_to_toml(const struct IrcConfig *cfg, char **out);

// # Safety
// `cfg` must be a live handle.
enum IrcStatus irc_config_set_seed(struct IrcConfig *cfg, uint64_t seed);

// # Safety
// `cfg` must be a live handle.
enum IrcStatus irc_config_set_steps(struct IrcConfig *cfg, size_t steps);

// Read one agent parameter.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_config_get_agent_param(const struct IrcConfig *cfg,
                                          enum IrcParam param,
                                          double *out);

// Set one agent parameter; the configuration is re-validated and left
// unchanged on failure.
//
// # Safety
// `cfg` must be a live handle.
enum IrcStatus irc_config_set_agent_param(struct IrcConfig *cfg, enum IrcParam param, double value);

// Restrict EM to the given parameters.
//
// # Safety
// `cfg` must be a live handle and `params` point to `n` values.
enum IrcStatus irc_config_set_learn(struct IrcConfig *cfg, const enum IrcParam *params, size_t n);

// # Safety
// `cfg` must be null or a live handle; it is invalid afterwards.
void irc_config_free(struct IrcConfig *cfg);

// Solve the configured agent's belief MDP.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_solve(const struct IrcConfig *cfg, struct IrcSolution **out);

// Number of policy states: locations times joint belief bins.
//
// # Safety
// `sol` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_solution_n_states(const struct IrcSolution *sol, size_t *out);

// Sup-norm Bellman residual and sweep count of the solution.
//
// # Safety
// `sol` must be a live handle; the out pointers must be valid.
enum IrcStatus irc_solution_convergence(const struct IrcSolution *sol,
                                        double *residual,
                                        size_t *sweeps);

// Action probabilities of one state, written to `probs[0..5]` in action
// order (idle, go to middle, go to box 1, go to box 2, press).
//
// # Safety
// `sol` must be a live handle and `probs` point to 5 writable doubles.
enum IrcStatus irc_solution_policy(const struct IrcSolution *sol, size_t state, double *probs);

// # Safety
// `sol` must be null or a live handle; it is invalid afterwards.
void irc_solution_free(struct IrcSolution *sol);

// Roll out the configured agent for `cfg.steps` steps from `cfg.seed`.
//
// # Safety
// `cfg` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_simulate(const struct IrcConfig *cfg, struct IrcTrajectory **out);

// Parse trajectory CSV text.
//
// # Safety
// `csv` must be a nul-terminated string and `out` a valid pointer.
enum IrcStatus irc_trajectory_from_csv(const char *csv, struct IrcTrajectory **out);

// Trajectory as CSV text.
//
// # Safety
// `traj` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_trajectory_to_csv(const struct IrcTrajectory *traj, char **out);

// # Safety
// `traj` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_trajectory_len(const struct IrcTrajectory *traj, size_t *out);

// # Safety
// `traj` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_trajectory_step(const struct IrcTrajectory *traj, size_t t, struct IrcStep *out);

// The simulated agent's beliefs at step `t`, when the trajectory carries
// ground truth.
//
// # Safety
// `traj` must be a live handle and `beliefs` point to 2 writable doubles.
enum IrcStatus irc_trajectory_belief(const struct IrcTrajectory *traj, size_t t, double *beliefs);

// # Safety
// `traj` must be null or a live handle; it is invalid afterwards.
void irc_trajectory_free(struct IrcTrajectory *traj);

// Observed-data log-likelihood of trajectories under the configured agent.
//
// # Safety
// `cfg` must be a live handle, `trajs` point to `n` live handles and `out`
// be a valid pointer.
enum IrcStatus irc_log_likelihood(const struct IrcConfig *cfg,
                                  const struct IrcTrajectory *const *trajs,
                                  size_t n,
                                  double *out);

// Fit the configured learnable parameters with multi-start EM; starts
// follow `cfg.em` and are seeded by `cfg.seed`.
//
// # Safety
// `cfg` must be a live handle, `trajs` point to `n` live handles and `out`
// be a valid pointer.
enum IrcStatus irc_fit(const struct IrcConfig *cfg,
                       const struct IrcTrajectory *const *trajs,
                       size_t n,
                       struct IrcFit **out);

// Log-likelihood of the best start.
//
// # Safety
// `fit` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_fit_loglik(const struct IrcFit *fit, double *out);

// EM iterations of the best start and the number of starts run.
//
// # Safety
// `fit` must be a live handle and the out pointers valid.
enum IrcStatus irc_fit_iterations(const struct IrcFit *fit, size_t *iterations, size_t *n_starts);

// Fitted value of one parameter.
//
// # Safety
// `fit` must be a live handle and `out` a valid pointer.
enum IrcStatus irc_fit_param(const struct IrcFit *fit, enum IrcParam param, double *out);

// Posterior-mean beliefs of both boxes at step `t` of trajectory `k`.
//
// # Safety
// `fit` must be a live handle and `beliefs` point to 2 writable doubles.
enum IrcStatus irc_fit_posterior_mean(const struct IrcFit *fit,
                                      size_t k,
                                      size_t t,
                                      double *beliefs);

// # Safety
// `fit` must be null or a live handle; it is invalid afterwards.
void irc_fit_free(struct IrcFit *fit);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* IRC_H */
