#ifndef OVREC_H
#define OVREC_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define OVREC_ORIGIN_VIEW -1

#define OVREC_ORIGIN_QUEUE -2

typedef enum OvrecStatus {
  OVREC_STATUS_OK = 0,
  OVREC_STATUS_NULL_POINTER = 1,
  OVREC_STATUS_INVALID_ARGUMENT = 2,
  OVREC_STATUS_SHAPE_MISMATCH = 3,
  OVREC_STATUS_IO = 4,
  OVREC_STATUS_FORMAT = 5,
  OVREC_STATUS_NOT_FOUND = 6,
  OVREC_STATUS_PANIC = 7,
} OvrecStatus;

typedef enum OvrecLossKind {
  /**
   * Positive average outside the log.
   */
  OVREC_LOSS_KIND_OUT = 0,
  /**
   * Guiding-bag average inside the log.
   */
  OVREC_LOSS_KIND_IN = 1,
  /**
   * `Out + lambda * In`.
   */
  OVREC_LOSS_KIND_TOTAL = 2,
} OvrecLossKind;

typedef enum OvrecDenominator {
  OVREC_DENOMINATOR_INCLUDE_GUIDES = 0,
  OVREC_DENOMINATOR_EXCLUDE_GUIDES = 1,
} OvrecDenominator;

/**
 * Named embedding table loaded from an EMB1 file.
 */
typedef struct OvrecEmbTable OvrecEmbTable;

/**
 * FIFO cache of unit embeddings and verb labels.
 */
typedef struct OvrecQueue OvrecQueue;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failing call on this thread, or null. The pointer
 * stays valid until the next failing call on the same thread.
 */
const char *ovrec_last_error(void);

/**
 * Contrastive loss over `rows` unit embeddings of width `dim`.
 *
 * Writes the mean loss to `value` and `∂value/∂z` (`rows × dim`) to `grad`.
 *
 * # Safety
 * `z` and `grad` must hold `rows * dim` values, `verbs` and `origins` must
 * hold `rows` values, and `value` must be writable.
 */
enum OvrecStatus ovrec_contrastive_loss(const double *z,
                                        size_t rows,
                                        size_t dim,
                                        const size_t *verbs,
                                        const int64_t *origins,
                                        enum OvrecLossKind kind,
                                        double tau_out,
                                        double tau_in,
                                        double lambda,
                                        enum OvrecDenominator denominator,
                                        double *value,
                                        double *grad);

/**
 * Rescaled absolute frame difference of a `T×H×W×C` clip, frame 0 zero.
 *
 * # Safety
 * `clip_data` and `out` must each hold `frames * height * width * channels`
 * values.
 */
enum OvrecStatus ovrec_temporal_gradient(const float *clip_data,
                                         size_t frames,
                                         size_t height,
                                         size_t width,
                                         size_t channels,
                                         float *out);

/**
 * Mixes the moving region of `a` with the static region of `b`.
 *
 * # Safety
 * `a`, `b` and `out` must each hold `frames * height * width * channels`
 * values.
 */
enum OvrecStatus ovrec_object_mix(const float *a,
                                  const float *b,
                                  size_t frames,
                                  size_t height,
                                  size_t width,
                                  size_t channels,
                                  float alpha,
                                  float *out);

/**
 * Harmonic mean of two accuracies; 0 when both are 0.
 */
double ovrec_hm(double a, double b);

/**
 * Blends a base-tuned and a novel-tuned class distribution, weighting each
 * model by `gamma` on its own classes.
 *
 * # Safety
 * `p_base`, `p_novel`, `is_novel` and `out` must each hold `classes` values.
 */
enum OvrecStatus ovrec_ensemble(const double *p_base,
                                const double *p_novel,
                                const bool *is_novel,
                                size_t classes,
                                double gamma,
                                double *out);

/**
 * Creates an empty queue holding at most `capacity` rows.
 */
struct OvrecQueue *ovrec_queue_new(size_t capacity);

/**
 * # Safety
 * `queue` must come from [`ovrec_queue_new`] and not be used afterwards.
 */
void ovrec_queue_free(struct OvrecQueue *queue);

/**
 * Number of cached rows; 0 for a null handle.
 *
 * # Safety
 * `queue` must be null or a live handle.
 */
size_t ovrec_queue_len(const struct OvrecQueue *queue);

/**
 * Appends every non-guide row, evicting the oldest beyond capacity, and
 * writes the number of accepted rows to `accepted`.
 *
 * # Safety
 * `queue` must be a live handle, `z` must hold `rows * dim` values, `verbs`
 * and `origins` must hold `rows` values, and `accepted` must be null or
 * writable.
 */
enum OvrecStatus ovrec_queue_update(struct OvrecQueue *queue,
                                    const double *z,
                                    size_t rows,
                                    size_t dim,
                                    const size_t *verbs,
                                    const int64_t *origins,
                                    size_t *accepted);

/**
 * Copies row `index` (oldest first) into `embedding` (`dim` values) and its
 * verb label into `verb`.
 *
 * # Safety
 * `queue` must be a live handle, `embedding` must hold `dim` values and
 * `verb` must be writable.
 */
enum OvrecStatus ovrec_queue_get(const struct OvrecQueue *queue,
                                 size_t index,
                                 double *embedding,
                                 size_t dim,
                                 size_t *verb);

/**
 * Loads an EMB1 file into a new handle written to `table`.
 *
 * # Safety
 * `path` must be a nul-terminated string and `table` writable.
 */
enum OvrecStatus ovrec_emb_open(const char *path, struct OvrecEmbTable **table);

/**
 * # Safety
 * `table` must come from [`ovrec_emb_open`] and not be used afterwards.
 */
void ovrec_emb_free(struct OvrecEmbTable *table);

/**
 * # Safety
 * `table` must be null or a live handle.
 */
size_t ovrec_emb_dim(const struct OvrecEmbTable *table);

/**
 * # Safety
 * `table` must be null or a live handle.
 */
size_t ovrec_emb_len(const struct OvrecEmbTable *table);

/**
 * Copies the vector named `name` into `values` (`dim` floats).
 *
 * # Safety
 * `table` must be a live handle, `name` a nul-terminated string and
 * `values` must hold `dim` floats.
 */
enum OvrecStatus ovrec_emb_get(const struct OvrecEmbTable *table,
                               const char *name,
                               float *values,
                               size_t dim);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* OVREC_H */
