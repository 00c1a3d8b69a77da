#ifndef FLOWCRYST_H
#define FLOWCRYST_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Anneal the atom-bit group.
 */
#define FLOWCRYST_ANNEAL_A 1

/**
 * Anneal the fractional-coordinate group.
 */
#define FLOWCRYST_ANNEAL_F 2

/**
 * Anneal the lattice group.
 */
#define FLOWCRYST_ANNEAL_L 4

#define FLOWCRYST_TASK_CSP 0

#define FLOWCRYST_TASK_DNG 1

typedef enum FlowcrystStatus {
  FLOWCRYST_STATUS_OK = 0,
  FLOWCRYST_STATUS_NULL_POINTER = 1,
  /**
   * Input failed validation (shape, domain, configuration).
   */
  FLOWCRYST_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Numerical or integration failure.
   */
  FLOWCRYST_STATUS_RUNTIME = 3,
  FLOWCRYST_STATUS_IO = 4,
  /**
   * An output buffer is too small; required sizes were written.
   */
  FLOWCRYST_STATUS_BUFFER_TOO_SMALL = 5,
  FLOWCRYST_STATUS_PANIC = 6,
} FlowcrystStatus;

/**
 * Trained vector-field model.
 */
typedef struct FlowcrystModel FlowcrystModel;

/**
 * Fitted base distribution: length prior and atom-count table.
 */
typedef struct FlowcrystPrior FlowcrystPrior;

/**
 * Borrowed view of a crystal.
 */
typedef struct FlowcrystCrystalView {
  size_t n_atoms;
  const int32_t *atomic_numbers;
  /**
   * `n_atoms × 3` fractional coordinates in `[0, 1)`.
   */
  const double *frac_coords;
  double lattice[6];
} FlowcrystCrystalView;

/**
 * Integration settings.
 */
typedef struct FlowcrystIntegration {
  size_t steps;
  double anneal_slope;
  /**
   * Bitwise OR of `FLOWCRYST_ANNEAL_*`.
   */
  uint32_t anneal_flags;
  uint64_t seed;
} FlowcrystIntegration;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Null-terminated library version; static storage.
 */
const char *flowcryst_version(void);

/**
 * Copies the last error message of this thread into `buf` (truncated, always
 * null-terminated when `len > 0`) and returns the full message length.
 */
size_t flowcryst_last_error(char *buf, size_t len);

/**
 * Entrywise shortest signed displacement from `f0` to `f1` on the torus, each in `(-1/2, 1/2]`.
 */
enum FlowcrystStatus flowcryst_torus_log(const double *f0,
                                         const double *f1,
                                         size_t n_atoms,
                                         double *out);

/**
 * Moves `f` by the tangent `v` and wraps into `[0, 1)`.
 */
enum FlowcrystStatus flowcryst_torus_exp(const double *f,
                                         const double *v,
                                         size_t n_atoms,
                                         double *out);

/**
 * Canonical lattice matrix (rows are lattice vectors) of `params`.
 */
enum FlowcrystStatus flowcryst_lattice_matrix(const double *params, double *out_rows);

/**
 * Lattice parameters of a matrix whose rows are the lattice vectors.
 */
enum FlowcrystStatus flowcryst_lattice_params(const double *rows, double *out_params);

/**
 * Structure matching; `*out_matched` is 1 with `*out_rmsd` the normalized RMSD, or 0.
 */
enum FlowcrystStatus flowcryst_match_structures(const struct FlowcrystCrystalView *x,
                                                const struct FlowcrystCrystalView *y,
                                                double stol,
                                                double angle_tol,
                                                double ltol,
                                                int32_t *out_matched,
                                                double *out_rmsd);

/**
 * Loads a checkpoint file.
 */
enum FlowcrystStatus flowcryst_model_load(const char *path_, struct FlowcrystModel **out);

void flowcryst_model_free(struct FlowcrystModel *model);

/**
 * `FLOWCRYST_TASK_CSP` or `FLOWCRYST_TASK_DNG`; -1 for a null handle.
 */
int32_t flowcryst_model_task(const struct FlowcrystModel *model);

/**
 * Largest atom count the model accepts; 0 for a null handle.
 */
size_t flowcryst_model_max_atoms(const struct FlowcrystModel *model);

/**
 * Loads a prior JSON file written by `flowcryst fit-base`.
 */
enum FlowcrystStatus flowcryst_prior_load(const char *path_, struct FlowcrystPrior **out);

void flowcryst_prior_free(struct FlowcrystPrior *prior);

/**
 * Predicts a structure for a composition of `n_atoms` atoms.
 *
 * Writes `n_atoms × 3` coordinates, six lattice parameters and a validity flag.
 */
enum FlowcrystStatus flowcryst_reconstruct(const struct FlowcrystModel *model,
                                           const struct FlowcrystPrior *prior,
                                           const int32_t *atomic_numbers,
                                           size_t n_atoms,
                                           const struct FlowcrystIntegration *cfg,
                                           double *out_frac,
                                           double *out_lattice,
                                           int32_t *out_valid);

/**
 * Generates one crystal de novo into buffers holding up to `capacity` atoms.
 *
 * `*out_n_atoms` always receives the generated size; when it exceeds
 * `capacity` nothing else is written and `BufferTooSmall` is returned.
 */
enum FlowcrystStatus flowcryst_sample(const struct FlowcrystModel *model,
                                      const struct FlowcrystPrior *prior,
                                      const struct FlowcrystIntegration *cfg,
                                      size_t capacity,
                                      size_t *out_n_atoms,
                                      int32_t *out_atomic_numbers,
                                      double *out_frac,
                                      double *out_lattice,
                                      int32_t *out_valid);

/**
 * Runs the built-in invariant checks; `*out_failed` receives the number of failures.
 */
enum FlowcrystStatus flowcryst_selfcheck(size_t *out_failed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* FLOWCRYST_H */
