#ifndef DEMOVAL_H
#define DEMOVAL_H

#include <stddef.h>
#include <stdint.h>

typedef enum DvStatus {
  DV_STATUS_OK = 0,
  DV_STATUS_NULL_POINTER = 1,
  DV_STATUS_INVALID_ARGUMENT = 2,
  DV_STATUS_UNKNOWN_ID = 3,
  DV_STATUS_BUDGET_EXCEEDED = 4,
  DV_STATUS_UNDEFINED = 5,
  DV_STATUS_BACKEND = 6,
  DV_STATUS_IO = 7,
  DV_STATUS_PANIC = 8,
} DvStatus;

// A synthetic model together with the pool of demos it knows (in id order).
typedef struct DvModel DvModel;

typedef struct DvTable DvTable;

typedef struct DvFairness {
  double m_dpd;
  double m_tp;
  double m_fp;
  double m_eod;
} DvFairness;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the next failing call.
const char *dv_last_error(void);

// Additive model over `n` demos with ids `d0`, `d1`, ... zero-padded to a common width, so
// table index `i` is demo `i`.
//
// # Safety
// `weights` must point to `n` doubles; `out` must be writable.
enum DvStatus dv_model_new_additive(double v0,
                                    double gamma,
                                    const double *weights,
                                    size_t n,
                                    struct DvModel **out);

// Model from a JSON spec (`v0`, `gamma`, `weights`, optional `interactions`). Demo indices
// follow the sorted weight ids.
//
// # Safety
// `json` must be a nul-terminated string; `out` must be writable.
enum DvStatus dv_model_from_json(const char *json, struct DvModel **out);

// # Safety
// `model` must come from `dv_model_new_additive` or `dv_model_from_json` and not be used afterwards.
void dv_model_free(struct DvModel *model);

// # Safety
// `model` must be a live handle.
size_t dv_model_len(const struct DvModel *model);

// Utility of the ordered prompt given by demo indices.
//
// # Safety
// `seq` must point to `len` indices; `out` must be writable.
enum DvStatus dv_model_score(const struct DvModel *model,
                             const size_t *seq,
                             size_t len,
                             double *out);

// Permutation-sampling values: `n_passes` passes of `k`-demo prompts, gate `mu`.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum DvStatus dv_compute_values(const struct DvModel *model,
                                size_t k,
                                size_t n_passes,
                                double mu,
                                uint64_t seed,
                                struct DvTable **out);

// Exact expectation over all ordered `k`-arrangements; fails with `BudgetExceeded` past `budget`.
//
// # Safety
// `model` must be a live handle; `out` must be writable.
enum DvStatus dv_exact_values(const struct DvModel *model,
                              size_t k,
                              uint64_t budget,
                              struct DvTable **out);

// `((t-1)/t) * phi_prev + v/t`; `t_new` must be at least 1.
//
// # Safety
// `out` must be writable.
enum DvStatus dv_update_running_mean(double phi_prev, uint64_t t_new, double v_prime, double *out);

// # Safety
// `table` must come from this library and not be used afterwards.
void dv_table_free(struct DvTable *table);

// # Safety
// `table` must be a live handle.
size_t dv_table_len(const struct DvTable *table);

// Value and update count of row `index`.
//
// # Safety
// `table` must be a live handle; `value` and `count` must be writable.
enum DvStatus dv_table_get(const struct DvTable *table,
                           size_t index,
                           double *value,
                           uint64_t *count);

// Copies the id of row `index` into `buf` (nul-terminated, truncated to `cap`). Returns the
// full id length in bytes, excluding the nul.
//
// # Safety
// `table` must be a live handle; `buf` must hold `cap` bytes (or be null with `cap == 0`).
size_t dv_table_id(const struct DvTable *table, size_t index, char *buf, size_t cap);

// Pooled table of two runs over the same ids.
//
// # Safety
// `a` and `b` must be live handles; `out` must be writable.
enum DvStatus dv_table_merge(const struct DvTable *a,
                             const struct DvTable *b,
                             struct DvTable **out);

// The table as `demo_id,value,count` CSV. Release with [`dv_string_free`].
//
// # Safety
// `table` must be a live handle; `out` must be writable.
enum DvStatus dv_table_to_csv(const struct DvTable *table, char **out);

// # Safety
// `s` must come from this library and not be used afterwards.
void dv_string_free(char *s);

// Demographic-parity and equalized-odds gaps of `n` binary predictions. Fails with
// `Undefined` when a group or (Y, A) cell is empty.
//
// # Safety
// `y_true`, `y_pred` and `a` must each point to `n` bytes; `out` must be writable.
enum DvStatus dv_fairness_metrics(const uint8_t *y_true,
                                  const uint8_t *y_pred,
                                  const uint8_t *a,
                                  size_t n,
                                  struct DvFairness *out);

// `P(Y = 1 | A = 1) - P(Y = 1 | A = 0)` over `n` labelled rows.
//
// # Safety
// `y` and `a` must each point to `n` bytes; `out` must be writable.
enum DvStatus dv_base_rate_parity(const uint8_t *y, const uint8_t *a, size_t n, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DEMOVAL_H */
