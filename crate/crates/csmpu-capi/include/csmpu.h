/* C ABI for the csmpu toolkit. Generated by cbindgen; do not edit. */

#ifndef CSMPU_H
#define CSMPU_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point.
 */
typedef enum CsmpuStatus {
  Ok = 0,
  NullPointer = 1,
  InvalidArgument = 2,
  RuntimeError = 3,
  Panic = 4,
} CsmpuStatus;

/**
 * Opaque MPU dataset handle.
 */
typedef struct CsmpuDataset CsmpuDataset;

/**
 * Opaque scorer handle.
 */
typedef struct CsmpuScorer CsmpuScorer;

/**
 * Opaque surrogate-loss handle.
 */
typedef struct CsmpuSurrogate CsmpuSurrogate;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Returns the message of the most recent error on this thread as a newly
 * allocated string, or NULL when no error has occurred. Free it with
 * [`csmpu_string_free`].
 */
char *csmpu_last_error_message(void);

/**
 * Frees a string allocated by this library.
 *
 * # Safety
 * `s` must be NULL or a pointer previously returned by a `csmpu_*`
 * string-producing function, not yet freed.
 */
void csmpu_string_free(char *s);

/**
 * Creates a surrogate loss. `family` is one of `unhinged`, `sigmoid_prob`,
 * `tanh_smooth`, `hinge`, `ramp`, `logistic`; `symmetrize` selects the
 * symmetrized-and-clipped variant.
 *
 * # Safety
 * `family` must be a valid NUL-terminated string; `out` must be valid.
 */
enum CsmpuStatus csmpu_surrogate_new(const char *family,
                                     double gamma,
                                     bool symmetrize,
                                     struct CsmpuSurrogate **out);

/**
 * # Safety
 * `handle` must be NULL or a live handle from `csmpu_surrogate_new`.
 */
void csmpu_surrogate_free(struct CsmpuSurrogate *handle);

/**
 * Evaluates the loss at margin `z`.
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
enum CsmpuStatus csmpu_surrogate_eval(const struct CsmpuSurrogate *handle, double z, double *out);

/**
 * Derivative `dl/dz` under the library's fixed subgradient conventions.
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
enum CsmpuStatus csmpu_surrogate_derivative(const struct CsmpuSurrogate *handle,
                                            double z,
                                            double *out);

/**
 * Max and 99th-percentile residuals of `|l(z) + l(-z) - 1|` on a uniform
 * grid.
 *
 * # Safety
 * All pointers must be valid.
 */
enum CsmpuStatus csmpu_surrogate_const_sum_check(const struct CsmpuSurrogate *handle,
                                                 double grid_lo,
                                                 double grid_hi,
                                                 uintptr_t n_points,
                                                 double *out_max,
                                                 double *out_p99);

/**
 * Generates the 2-D Gaussian synthetic MPU dataset: `k` classes on a
 * regular polygon of circumradius `separation`, labeled sets for classes
 * `0..k-1`, a pool of `n_unlabeled` mixture draws with hidden labels.
 *
 * # Safety
 * `priors` must point to `n_priors` doubles; `out` must be valid.
 */
enum CsmpuStatus csmpu_dataset_synthetic(uintptr_t k,
                                         const double *priors,
                                         uintptr_t n_priors,
                                         uintptr_t n_labeled_per_class,
                                         uintptr_t n_unlabeled,
                                         double separation,
                                         uint64_t seed,
                                         struct CsmpuDataset **out);

/**
 * # Safety
 * `handle` must be NULL or a live handle from `csmpu_dataset_synthetic`.
 */
void csmpu_dataset_free(struct CsmpuDataset *handle);

/**
 * Creates a scorer: `widths` spells the layer sizes from input to output,
 * He-normal initialized from `seed`, batch norm on all hidden layers when
 * `batch_norm` is set.
 *
 * # Safety
 * `widths` must point to `n_widths` entries; `out` must be valid.
 */
enum CsmpuStatus csmpu_scorer_new(const uintptr_t *widths,
                                  uintptr_t n_widths,
                                  bool batch_norm,
                                  uint64_t seed,
                                  struct CsmpuScorer **out);

/**
 * # Safety
 * `handle` must be NULL or a live handle from a scorer constructor.
 */
void csmpu_scorer_free(struct CsmpuScorer *handle);

/**
 * Scores `n` rows of width `d` (row-major) in inference mode into `out`
 * (`n * k` doubles, row-major).
 *
 * # Safety
 * `x` must hold `n * d` doubles and `out` must hold `n * k` doubles.
 */
enum CsmpuStatus csmpu_scorer_forward(const struct CsmpuScorer *handle,
                                      const double *x,
                                      uintptr_t n,
                                      uintptr_t d,
                                      double *out);

/**
 * Serializes the scorer checkpoint to JSON. Free with `csmpu_string_free`.
 *
 * # Safety
 * `handle` and `out` must be valid pointers.
 */
enum CsmpuStatus csmpu_scorer_to_json(const struct CsmpuScorer *handle, char **out);

/**
 * Restores a scorer from a JSON checkpoint.
 *
 * # Safety
 * `json` must be a valid NUL-terminated string; `out` must be valid.
 */
enum CsmpuStatus csmpu_scorer_from_json(const char *json, struct CsmpuScorer **out);

/**
 * Evaluates the configured risk estimator on the full dataset in inference
 * mode, writing the total into `out_total`.
 *
 * # Safety
 * All pointers must be valid; `estimator`/`correction` NUL-terminated.
 */
enum CsmpuStatus csmpu_risk(const struct CsmpuDataset *dataset,
                            const struct CsmpuScorer *scorer,
                            const char *estimator,
                            const char *correction,
                            const struct CsmpuSurrogate *surrogate,
                            double *out_total);

/**
 * Trains the scorer in place with adaptive-moment steps and writes the
 * final epoch's mean training risk into `out_final_risk`.
 *
 * # Safety
 * All pointers must be valid; `estimator`/`correction` NUL-terminated.
 */
enum CsmpuStatus csmpu_train(struct CsmpuScorer *scorer,
                             const struct CsmpuDataset *dataset,
                             const char *estimator,
                             const char *correction,
                             const struct CsmpuSurrogate *surrogate,
                             uintptr_t epochs,
                             uintptr_t batch_size,
                             double learning_rate,
                             uint64_t seed,
                             double *out_final_risk);

/**
 * Accuracy and macro-F1 of the scorer on the pool against its hidden
 * labels (synthetic/benchmark datasets only).
 *
 * # Safety
 * All pointers must be valid.
 */
enum CsmpuStatus csmpu_evaluate_pool(const struct CsmpuScorer *scorer,
                                     const struct CsmpuDataset *dataset,
                                     double *out_accuracy,
                                     double *out_macro_f1);

/**
 * The NP-type class-prior lower bound
 * `clamp((pool_accept - alpha) / max(pos_accept, epsilon), 0, 1)`.
 */
double csmpu_np_lower_bound(double pool_accept_rate,
                            double pos_accept_rate,
                            double alpha,
                            double epsilon);

/**
 * Projects `pi` onto `{pi_i >= lower_i, sum pi <= 1}` (uniform slack
 * scaling), writing `n` doubles into `out`.
 *
 * # Safety
 * `pi`, `lower`, `out` must each point to `n` doubles.
 */
enum CsmpuStatus csmpu_project_feasible(const double *pi,
                                        const double *lower,
                                        uintptr_t n,
                                        double *out);

/**
 * Runs the margin-based prior pipeline (NP lower bounds, detectability,
 * penalized-L1 moment matching with library defaults). `pool` is row-major
 * `n_pool x m`; `pos[i]` is row-major `pos_rows[i] x m`. Writes `m` point
 * estimates and `m` lower bounds.
 *
 * # Safety
 * Buffer dimensions must match the documented layout.
 */
enum CsmpuStatus csmpu_estimate_priors(const double *pool,
                                       uintptr_t n_pool,
                                       const double *const *pos,
                                       const uintptr_t *pos_rows,
                                       uintptr_t m,
                                       double *out_point,
                                       double *out_lower);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CSMPU_H */
