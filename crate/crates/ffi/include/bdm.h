#ifndef BDM_H
#define BDM_H

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

#define BDM_METHOD_IO 0

#define BDM_METHOD_HO 1

#define BDM_METHOD_SKS 2

#define BDM_METHOD_SKS_NUM 3

#define BDM_METHOD_SN 4

#define BDM_METHOD_WALD 5

#define BDM_METHOD_EXACT 6

#define BDM_FRAME_WHITENED 0

#define BDM_FRAME_RAW 1

typedef enum BdmStatus {
  BDM_STATUS_OK = 0,
  BDM_STATUS_NULL_POINTER = 1,
  /**
   * Bad arguments or input data.
   */
  BDM_STATUS_INVALID_ARGUMENT = 2,
  /**
   * Optimization, root finding or quadrature failed.
   */
  BDM_STATUS_NUMERIC_FAILURE = 3,
  /**
   * The method is not available for this model or target.
   */
  BDM_STATUS_UNSUPPORTED = 4,
  BDM_STATUS_PANIC = 5,
} BdmStatus;

/**
 * A fitted model.
 */
typedef struct BdmModel BdmModel;

/**
 * Evaluation switches. Pass NULL for the defaults (Wald statistic, whitened frame).
 */
typedef struct BdmOptions {
  /**
   * Likelihood-ratio instead of Wald statistic for `BDM_METHOD_WALD`.
   */
  bool lr;
  /**
   * `BDM_FRAME_*`, used by joint `BDM_METHOD_SN`.
   */
  uint32_t frame;
} BdmOptions;

typedef struct BdmValue {
  double delta;
  /**
   * `P(θ ≤ θ₀ | y)`, or NaN when the method has no tail (joint hypotheses).
   */
  double tail_low;
  /**
   * The raw value fell outside [0, 1] and was clamped.
   */
  bool clamped;
} BdmValue;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Exponential sample of size `n` with maximum likelihood estimate `mle`,
 * Jeffreys prior.
 *
 * # Safety
 * `out` must be a valid pointer to writable storage for one handle.
 */
enum BdmStatus bdm_model_exponential(size_t n, double mle, struct BdmModel **out);

/**
 * Logistic regression read from a CSV file (covariate columns plus a 0/1
 * column `y`). A NULL path selects the bundled dataset.
 *
 * # Safety
 * `path` is NULL or a NUL-terminated string; `out` must be writable.
 */
enum BdmStatus bdm_model_logistic_csv(const char *path, double prior_sd, struct BdmModel **out);

/**
 * Logistic regression on an in-memory design: `x` is `rows × cols`
 * row-major without the intercept column, `y` holds `rows` 0/1 responses.
 *
 * # Safety
 * `x` must point to `rows * cols` doubles, `y` to `rows` doubles, and `out`
 * must be writable.
 */
enum BdmStatus bdm_model_logistic(const double *x,
                                  size_t rows,
                                  size_t cols,
                                  const double *y,
                                  double prior_sd,
                                  struct BdmModel **out);

/**
 * Number of model parameters, or 0 for a NULL handle.
 *
 * # Safety
 * `model` is NULL or a live handle.
 */
size_t bdm_model_dim(const struct BdmModel *model);

/**
 * # Safety
 * `model` is NULL or a handle not yet freed.
 */
void bdm_model_free(struct BdmModel *model);

/**
 * Evaluates one discrepancy measure. For the exponential model pass
 * `n_psi = 0`; for the logistic model one index gives a marginal and several
 * give a joint hypothesis (Wald and SN only).
 *
 * # Safety
 * `model` is a live handle, `psi_index` points to `n_psi` values, `theta0`
 * to `n_theta` values, `options` is NULL or valid, and `out` is writable.
 */
enum BdmStatus bdm_evaluate(const struct BdmModel *model,
                            uint32_t method,
                            const size_t *psi_index,
                            size_t n_psi,
                            const double *theta0,
                            size_t n_theta,
                            const struct BdmOptions *options,
                            struct BdmValue *out);

/**
 * As `bdm_evaluate`, but writes the full result (with diagnostics) as a JSON
 * string that must be released with `bdm_string_free`.
 *
 * # Safety
 * Same as `bdm_evaluate`; `out_json` must be writable.
 */
enum BdmStatus bdm_evaluate_json(const struct BdmModel *model,
                                 uint32_t method,
                                 const size_t *psi_index,
                                 size_t n_psi,
                                 const double *theta0,
                                 size_t n_theta,
                                 const struct BdmOptions *options,
                                 char **out_json);

/**
 * # Safety
 * `s` is NULL or a string returned by this library and not yet freed.
 */
void bdm_string_free(char *s);

/**
 * Message for the last failed call on this thread; empty after a success.
 * Valid until the next call into the library from the same thread.
 */
const char *bdm_last_error(void);

const char *bdm_version(void);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* BDM_H */
