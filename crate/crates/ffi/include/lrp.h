#ifndef LRP_H
#define LRP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result code of every fallible call.
 */
typedef enum LrpStatus {
  LRP_STATUS_OK = 0,
  LRP_STATUS_NULL_POINTER = 1,
  LRP_STATUS_INVALID_ARGUMENT = 2,
  LRP_STATUS_IO = 3,
  LRP_STATUS_MODEL = 4,
  LRP_STATUS_CONFIG = 5,
  LRP_STATUS_SHAPE_MISMATCH = 6,
  LRP_STATUS_UNKNOWN_CLASS = 7,
  LRP_STATUS_BUFFER_TOO_SMALL = 8,
  LRP_STATUS_ATTRIBUTION = 9,
  LRP_STATUS_PANIC = 99,
} LrpStatus;

/**
 * Input relevance for one class.
 */
typedef struct LrpAttribution LrpAttribution;

/**
 * Composite rule configuration.
 */
typedef struct LrpConfig LrpConfig;

/**
 * Loaded network.
 */
typedef struct LrpModel LrpModel;

/**
 * Pixel box, inclusive minimum and exclusive maximum.
 */
typedef struct LrpBox {
  size_t x_min;
  size_t y_min;
  size_t x_max;
  size_t y_max;
} LrpBox;

/**
 * Localization of one heatmap against a set of boxes.
 */
typedef struct LrpScore {
  double mu;
  double mu_w;
  double r_in;
  double r_tot;
  size_t s_in;
  size_t s_tot;
} LrpScore;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *lrp_last_error(void);

/**
 * Loads a model manifest and its weight blob.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` a writable pointer.
 */
enum LrpStatus lrp_model_load(const char *path, struct LrpModel **out);

/**
 * # Safety
 * `model` must come from [`lrp_model_load`] and not be used afterwards.
 */
void lrp_model_free(struct LrpModel *model);

/**
 * Writes the `(C, H, W)` input shape into `shape[0..3]`.
 *
 * # Safety
 * `model` must be a live handle and `shape` point to three writable values.
 */
enum LrpStatus lrp_model_input_shape(const struct LrpModel *model, size_t *shape);

/**
 * Number of output classes, or 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t lrp_model_num_classes(const struct LrpModel *model);

/**
 * Copies the label of class `index` into `buf` as a NUL-terminated string.
 * `needed` receives the buffer size required, terminator included, so a
 * first call with `buf_len == 0` can size the buffer.
 *
 * # Safety
 * `buf` must hold `buf_len` writable bytes; `needed` may be null.
 */
enum LrpStatus lrp_model_class_label(const struct LrpModel *model,
                                     size_t index,
                                     char *buf,
                                     size_t buf_len,
                                     size_t *needed);

/**
 * Looks up a class label.
 *
 * # Safety
 * `label` must be NUL-terminated and `index` writable.
 */
enum LrpStatus lrp_model_class_index(const struct LrpModel *model,
                                     const char *label,
                                     size_t *index);

/**
 * Runs the network on a `(C, H, W)` row-major input and writes the logits.
 *
 * # Safety
 * `input` must hold `input_len` values and `logits` `logits_len` slots.
 */
enum LrpStatus lrp_model_forward(const struct LrpModel *model,
                                 const double *input,
                                 size_t input_len,
                                 double *logits,
                                 size_t logits_len);

/**
 * Parses a composite configuration from JSON text.
 *
 * # Safety
 * `json` must be NUL-terminated and `out` writable.
 */
enum LrpStatus lrp_config_from_json(const char *json, struct LrpConfig **out);

/**
 * Reads a composite configuration file.
 *
 * # Safety
 * `path` must be NUL-terminated and `out` writable.
 */
enum LrpStatus lrp_config_load(const char *path, struct LrpConfig **out);

/**
 * The `cmp` preset: epsilon on dense layers, alpha-beta on the conv stack
 * and flat on its first `flat_n` layers.
 *
 * # Safety
 * `out` must be writable.
 */
enum LrpStatus lrp_config_cmp(double alpha, size_t flat_n, struct LrpConfig **out);

/**
 * Plain z rule everywhere.
 *
 * # Safety
 * `out` must be writable.
 */
enum LrpStatus lrp_config_uniform_z(struct LrpConfig **out);

/**
 * # Safety
 * `config` must come from one of the `lrp_config_*` constructors.
 */
void lrp_config_free(struct LrpConfig *config);

/**
 * Explains `class_index` for one input.
 *
 * # Safety
 * `input` must hold `input_len` values and `out` be writable.
 */
enum LrpStatus lrp_attribute(const struct LrpModel *model,
                             const struct LrpConfig *config,
                             const double *input,
                             size_t input_len,
                             size_t class_index,
                             struct LrpAttribution **out);

/**
 * # Safety
 * `attr` must come from [`lrp_attribute`].
 */
void lrp_attribution_free(struct LrpAttribution *attr);

/**
 * Number of relevance values, or 0 for a null handle.
 *
 * # Safety
 * `attr` must be null or a live handle.
 */
size_t lrp_attribution_len(const struct LrpAttribution *attr);

/**
 * Borrowed view of the `(C, H, W)` relevance values, valid while `attr` lives.
 *
 * # Safety
 * `attr` must be null or a live handle.
 */
const double *lrp_attribution_values(const struct LrpAttribution *attr);

/**
 * Writes the relevance shape into `shape[0..3]`.
 *
 * # Safety
 * `shape` must point to three writable values.
 */
enum LrpStatus lrp_attribution_shape(const struct LrpAttribution *attr, size_t *shape);

/**
 * Logit of the explained class.
 *
 * # Safety
 * `attr` must be a live handle.
 */
double lrp_attribution_logit(const struct LrpAttribution *attr);

/**
 * Hex SHA-256 of the resolved rules, valid while `attr` lives.
 *
 * # Safety
 * `attr` must be null or a live handle.
 */
const char *lrp_attribution_digest(const struct LrpAttribution *attr);

/**
 * Saves the map in the binary `.attr` format.
 *
 * # Safety
 * `path` must be NUL-terminated.
 */
enum LrpStatus lrp_attribution_write(const struct LrpAttribution *attr, const char *path);

/**
 * Pools the map over channels and scores it against the union of `boxes`.
 *
 * # Safety
 * `boxes` must hold `n_boxes` entries and `out` be writable.
 */
enum LrpStatus lrp_localization_score(const struct LrpAttribution *attr,
                                      const struct LrpBox *boxes,
                                      size_t n_boxes,
                                      struct LrpScore *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LRP_H */
