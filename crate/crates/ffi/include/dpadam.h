#ifndef DPADAM_H
#define DPADAM_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result codes shared by every entry point.
 */
typedef enum DpStatus {
  DP_STATUS_OK = 0,
  DP_STATUS_NULL_POINTER = 1,
  DP_STATUS_INVALID_ARGUMENT = 2,
  DP_STATUS_SHAPE_MISMATCH = 3,
  DP_STATUS_CALIBRATION_FAILED = 4,
  DP_STATUS_VALIDATION_FAILED = 5,
  DP_STATUS_IO = 6,
  DP_STATUS_CHECKPOINT = 7,
  DP_STATUS_BUFFER_SIZE = 8,
  /*
   A panic was caught at the boundary; the handle involved should be
   treated as unusable.
   */
  DP_STATUS_INTERNAL = 99,
} DpStatus;

/*
 Opaque privacy-ledger handle.
 */
typedef struct DpLedger DpLedger;

/*
 Opaque model handle.
 */
typedef struct DpModel DpModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or NULL.

 The pointer stays valid until the next failing call on this thread.
 */
const char *dpadam_last_error(void);

/*
 Builds an MLP; `groups = 0` means no normalization.

 # Safety
 `widths` must point to `n_widths` readable values and `out_model` must
 be writable.
 */
enum DpStatus dpadam_model_build(const size_t *widths,
                                 size_t n_widths,
                                 size_t groups,
                                 uint64_t seed,
                                 struct DpModel **out_model);

/*
 Loads a JSON checkpoint.

 # Safety
 `path` must be a NUL-terminated string; `out_model` must be writable.
 */
enum DpStatus dpadam_model_load(const char *path, struct DpModel **out_model);

/*
 # Safety
 `model` must be a live handle; `path` a NUL-terminated string.
 */
enum DpStatus dpadam_model_save(const struct DpModel *model, const char *path);

/*
 Releases a model; NULL is ignored.

 # Safety
 `model` must be NULL or a handle not yet freed.
 */
void dpadam_model_free(struct DpModel *model);

/*
 # Safety
 `model` must be a live handle and the outputs writable.
 */
enum DpStatus dpadam_model_shape(const struct DpModel *model,
                                 size_t *out_input_dim,
                                 size_t *out_param_count);

/*
 Copies every parameter, flattened in parameter order, into `buf`
 (length must equal the parameter count).

 # Safety
 `model` must be a live handle; `buf` must hold `len` values.
 */
enum DpStatus dpadam_model_params(const struct DpModel *model, double *buf, size_t len);

/*
 Loss and gradient for one sample; the gradient is flattened in parameter
 order into `grad` (length must equal the parameter count).

 # Safety
 `model` must be a live handle; `x` must hold `x_len` values, `grad`
 `grad_len` values; `out_loss` must be writable.
 */
enum DpStatus dpadam_model_per_sample_gradient(const struct DpModel *model,
                                               const double *x,
                                               size_t x_len,
                                               uint8_t label,
                                               double *out_loss,
                                               double *grad,
                                               size_t grad_len);

/*
 Probability of label 1 for each of `rows` samples in `xs` (row-major).

 # Safety
 `model` must be a live handle; `xs` must hold `rows · input_dim` values
 and `out_probs` `rows` values.
 */
enum DpStatus dpadam_model_predict(const struct DpModel *model,
                                   const double *xs,
                                   size_t rows,
                                   double *out_probs);

/*
 # Safety
 `out_ledger` must be writable.
 */
enum DpStatus dpadam_ledger_new(struct DpLedger **out_ledger);

/*
 Releases a ledger; NULL is ignored.

 # Safety
 `ledger` must be NULL or a handle not yet freed.
 */
void dpadam_ledger_free(struct DpLedger *ledger);

/*
 Charges one step with noise multiplier `sigma` at sampling rate `q`.

 # Safety
 `ledger` must be a live handle, not used concurrently.
 */
enum DpStatus dpadam_ledger_record(struct DpLedger *ledger, double sigma, double q);

/*
 # Safety
 `ledger` must be a live handle; `out_steps` writable.
 */
enum DpStatus dpadam_ledger_steps(const struct DpLedger *ledger, uint64_t *out_steps);

/*
 ε spent so far at `delta`, with the minimizing order.

 # Safety
 `ledger` must be a live handle; outputs writable.
 */
enum DpStatus dpadam_ledger_epsilon(const struct DpLedger *ledger,
                                    double delta,
                                    double *out_epsilon,
                                    double *out_alpha);

/*
 ε after `steps` invocations of the subsampled Gaussian mechanism.

 # Safety
 Outputs must be writable.
 */
enum DpStatus dpadam_epsilon_for(double sigma,
                                 double q,
                                 uint64_t steps,
                                 double delta,
                                 double *out_epsilon,
                                 double *out_alpha);

/*
 Smallest σ (relative tolerance 1e-3) meeting `target_eps`.

 # Safety
 `out_sigma` must be writable.
 */
enum DpStatus dpadam_calibrate_sigma(double target_eps,
                                     double delta,
                                     double q,
                                     uint64_t steps,
                                     double *out_sigma);

/*
 # Safety
 `out_sigma` must be writable.
 */
enum DpStatus dpadam_classic_gaussian_sigma(double epsilon,
                                            double delta,
                                            double sensitivity,
                                            double *out_sigma);

/*
 Scales `g` in place to global L2 norm at most `bound`.

 # Safety
 `g` must hold `len` writable values.
 */
enum DpStatus dpadam_clip_in_place(double *g, size_t len, double bound);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DPADAM_H */
