#ifndef PATHDENS_H
#define PATHDENS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PdStatus {
  PD_STATUS_OK = 0,
  PD_STATUS_NULL_POINTER = 1,
  PD_STATUS_INVALID_UTF8 = 2,
  PD_STATUS_VALIDATION = 3,
  PD_STATUS_DOMAIN = 4,
  PD_STATUS_CONTRACT = 5,
  PD_STATUS_CONFIG = 6,
  PD_STATUS_RESOURCE = 7,
  PD_STATUS_NUMERICAL = 8,
  PD_STATUS_DIVERGENCE = 9,
  PD_STATUS_IO = 10,
  PD_STATUS_OUT_OF_RANGE = 11,
  PD_STATUS_BUFFER_TOO_SMALL = 12,
  PD_STATUS_PANIC = 13,
} PdStatus;

/**
 * Simulated state path on the scenario grid, row-major `len x dim`.
 */
typedef struct PdPath PdPath;

/**
 * Parsed scenario.
 */
typedef struct PdScenario PdScenario;

/**
 * Artifacts of one command.
 */
typedef struct PdSolution PdSolution;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null.
 */
const char *pd_last_error_message(void);

/**
 * Library version, static string.
 */
const char *pd_version(void);

/**
 * Parses a scenario JSON document.
 *
 * # Safety
 * `json` must be a NUL-terminated string and `out` a valid pointer.
 */
enum PdStatus pd_scenario_from_json(const char *json, struct PdScenario **out);

/**
 * # Safety
 * `sc` must come from [`pd_scenario_from_json`] and not be freed twice.
 */
void pd_scenario_free(struct PdScenario *sc);

/**
 * SHA-256 of the scenario bytes, hex encoded.
 *
 * # Safety
 * `sc` must be a live scenario handle or null.
 */
const char *pd_scenario_hash(const struct PdScenario *sc);

/**
 * State dimension `n` and noise dimension `d`.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PdStatus pd_scenario_dims(const struct PdScenario *sc, size_t *n, size_t *d);

/**
 * Runs a command (`simulate`, `malliavin`, `hormander`, `master-check`,
 * `rough-check`, `delay-lift`, `density`).
 *
 * # Safety
 * `sc` must be live, `command` NUL-terminated and `out` valid.
 */
enum PdStatus pd_run(const struct PdScenario *sc,
                     const char *command,
                     uint32_t mesh_doubling,
                     struct PdSolution **out);

/**
 * # Safety
 * `sol` must come from [`pd_run`] and not be freed twice.
 */
void pd_solution_free(struct PdSolution *sol);

/**
 * One-line summary of the run.
 *
 * # Safety
 * `sol` must be live or null.
 */
const char *pd_solution_summary(const struct PdSolution *sol);

/**
 * # Safety
 * `sol` must be live or null.
 */
size_t pd_solution_artifact_count(const struct PdSolution *sol);

/**
 * File name and contents of artifact `index`.
 *
 * # Safety
 * `sol` must be live and the output pointers valid.
 */
enum PdStatus pd_solution_artifact(const struct PdSolution *sol,
                                   size_t index,
                                   const char **name,
                                   const char **contents);

/**
 * Writes every artifact into `dir`, creating it if needed.
 *
 * # Safety
 * `sol` must be live and `dir` NUL-terminated.
 */
enum PdStatus pd_solution_write(const struct PdSolution *sol, const char *dir);

/**
 * Simulates the scenario's state path.
 *
 * # Safety
 * `sc` must be live and `out` valid.
 */
enum PdStatus pd_simulate(const struct PdScenario *sc, struct PdPath **out);

/**
 * # Safety
 * `path` must come from [`pd_simulate`] and not be freed twice.
 */
void pd_path_free(struct PdPath *path);

/**
 * Number of grid points and state dimension.
 *
 * # Safety
 * All pointers must be valid.
 */
enum PdStatus pd_path_shape(const struct PdPath *path, size_t *len, size_t *dim);

/**
 * Copies grid times (`len` values) and states (`len * dim` values, row
 * major) into caller buffers of the given capacities. Either buffer may be
 * null to skip it.
 *
 * # Safety
 * Non-null buffers must hold at least their stated capacity.
 */
enum PdStatus pd_path_copy(const struct PdPath *path,
                           double *times,
                           size_t times_cap,
                           double *states,
                           size_t states_cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATHDENS_H */
