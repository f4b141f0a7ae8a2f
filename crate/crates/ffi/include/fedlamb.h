#ifndef FEDLAMB_H
#define FEDLAMB_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum FlStatus {
  FL_STATUS_OK = 0,
  FL_STATUS_NULL_POINTER = 1,
  FL_STATUS_INVALID_UTF8 = 2,
  FL_STATUS_CONFIG = 3,
  FL_STATUS_DATA = 4,
  FL_STATUS_NUMERIC = 5,
  FL_STATUS_PROTOCOL = 6,
  FL_STATUS_IO = 7,
  FL_STATUS_BUFFER_TOO_SMALL = 8,
  FL_STATUS_PANIC = 9,
} FlStatus;

// Opaque simulation handle.
typedef struct FlSimulation FlSimulation;

typedef struct FlRoundMetrics {
  uint64_t round;
  double train_loss;
  double test_accuracy;
  double grad_norm_sq;
  uint64_t uplink;
  uint64_t downlink;
  uint64_t grad_evals;
  double wall_ms;
} FlRoundMetrics;

// Float counts of one round, summed over participants.
typedef struct FlCommEntry {
  uint64_t uplink_model;
  uint64_t uplink_moment;
  uint64_t uplink_gradient;
  uint64_t downlink_model;
  uint64_t downlink_moment;
} FlCommEntry;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Builds a simulation from a config document in TOML form. The `output`,
// `repeat` and `rounds` keys are accepted but unused; rounds are driven by
// `fl_sim_run_round`.
//
// # Safety
// `config_toml` is a nul-terminated string; `out` is a writable pointer.
enum FlStatus fl_sim_new(const char *config_toml, struct FlSimulation **out);

// Advances one round and optionally reports its metrics.
//
// # Safety
// `sim` comes from `fl_sim_new`; `metrics` is null or writable.
enum FlStatus fl_sim_run_round(struct FlSimulation *sim, struct FlRoundMetrics *metrics);

// Number of model parameters; 0 for a null handle.
//
// # Safety
// `sim` is null or comes from `fl_sim_new`.
size_t fl_sim_param_count(const struct FlSimulation *sim);

// Copies the global model into `buf`, which must hold
// `fl_sim_param_count` values.
//
// # Safety
// `sim` comes from `fl_sim_new`; `buf` points to `len` writable doubles.
enum FlStatus fl_sim_global_params(const struct FlSimulation *sim, double *buf, size_t len);

// # Safety
// `sim` is null or comes from `fl_sim_new` and is not used afterwards.
void fl_sim_free(struct FlSimulation *sim);

// Message of the last failed call on this thread; empty if none. The
// pointer stays valid until the next failing call on the same thread.
const char *fl_last_error_message(void);

// Closed-form traffic of one round. `lazy_period = 0` syncs every round.
//
// # Safety
// `protocol` is a nul-terminated name such as "fed-lamb"; `out` is writable.
enum FlStatus fl_comm_account(const char *protocol,
                              size_t params,
                              size_t participants,
                              size_t round,
                              size_t lazy_period,
                              struct FlCommEntry *out);

// Runs the experiment described by a config file, writing its metrics and
// summary files.
//
// # Safety
// `config_path` is a nul-terminated path.
enum FlStatus fl_run_experiment(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FEDLAMB_H */
