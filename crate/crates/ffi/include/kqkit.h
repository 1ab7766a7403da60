#ifndef KQKIT_H
#define KQKIT_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/*
 Status code returned by every fallible entry point.
 */
typedef enum KqStatus {
  KQ_STATUS_OK = 0,
  KQ_STATUS_NULL_POINTER = 1,
  KQ_STATUS_IO = 2,
  KQ_STATUS_FORMAT = 3,
  KQ_STATUS_INVALID_ARGUMENT = 4,
  KQ_STATUS_DEGENERATE = 5,
  KQ_STATUS_SELECTION = 6,
  KQ_STATUS_UNSTABLE_ARI = 7,
  KQ_STATUS_PANIC = 8,
} KqStatus;

/*
 Opaque handle to the metrics computed for one layer.
 */
typedef struct KqLayerMetrics KqLayerMetrics;

/*
 Opaque handle to a validated per-layer representation set.
 */
typedef struct KqRepresentationSet KqRepresentationSet;

/*
 Scalar view of a [`KqLayerMetrics`] handle.
 */
typedef struct KqMetricValues {
  uint32_t layer;
  double s;
  double i;
  double e;
  double q;
  double avg_dpw;
  double avg_dpb;
  double min_dpw;
  double min_dist_b;
  double avg_norm;
  double avg_svde;
  uint64_t global_embed_dim;
  uint64_t diagnostic_count;
} KqMetricValues;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failing call on this thread, or null if none.

 The pointer stays valid until the next failing call on the same thread.
 */
const char *kq_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *kq_version(void);

/*
 Releases a string returned by this library.

 # Safety
 `s` must be null or a pointer returned by this library and not yet freed.
 */
void kq_string_free(char *s);

/*
 Builds a set from `n * d` row-major floats and `n` labels in `[0, classes)`.

 # Safety
 `data` must point to `n * d` floats, `labels` to `n` integers and `out`
 to writable storage for one handle.
 */
enum KqStatus kq_set_new(uint32_t layer,
                         const float *data,
                         const uint32_t *labels,
                         uint64_t n,
                         uint64_t d,
                         uint32_t classes,
                         struct KqRepresentationSet **out);

/*
 Reads a binary dump from `path`.

 # Safety
 `path` must be a NUL-terminated string and `out` writable.
 */
enum KqStatus kq_set_read(const char *path, struct KqRepresentationSet **out);

/*
 Writes `set` as a binary dump to `path`.

 # Safety
 `set` must be a live handle and `path` a NUL-terminated string.
 */
enum KqStatus kq_set_write(const struct KqRepresentationSet *set, const char *path);

/*
 Releases a set handle. Null is ignored.

 # Safety
 `set` must be null or a live handle from this library.
 */
void kq_set_free(struct KqRepresentationSet *set);

/*
 Number of samples, or 0 for null.

 # Safety
 `set` must be null or a live handle.
 */
uint64_t kq_set_len(const struct KqRepresentationSet *set);

/*
 Feature dimension, or 0 for null.

 # Safety
 `set` must be null or a live handle.
 */
uint64_t kq_set_dim(const struct KqRepresentationSet *set);

/*
 Class count, or 0 for null.

 # Safety
 `set` must be null or a live handle.
 */
uint32_t kq_set_classes(const struct KqRepresentationSet *set);

/*
 Layer index, or 0 for null.

 # Safety
 `set` must be null or a live handle.
 */
uint32_t kq_set_layer(const struct KqRepresentationSet *set);

/*
 Computes all metrics for one layer. `cap == 0` analyzes every sample;
 otherwise a stratified subsample of at most `cap` rows drawn with `seed`.

 # Safety
 `set` must be a live handle and `out` writable.
 */
enum KqStatus kq_analyze(const struct KqRepresentationSet *set,
                         uint64_t cap,
                         uint64_t seed,
                         struct KqLayerMetrics **out);

/*
 Releases a metrics handle. Null is ignored.

 # Safety
 `metrics` must be null or a live handle from this library.
 */
void kq_metrics_free(struct KqLayerMetrics *metrics);

/*
 Copies the scalar metrics into `out`.

 # Safety
 `metrics` must be a live handle and `out` writable.
 */
enum KqStatus kq_metrics_values(const struct KqLayerMetrics *metrics, struct KqMetricValues *out);

/*
 Serializes the metrics as a JSON object. Free the result with
 [`kq_string_free`].

 # Safety
 `metrics` must be a live handle and `out` writable.
 */
enum KqStatus kq_metrics_to_json(const struct KqLayerMetrics *metrics, char **out);

/*
 Packing radius for `n` points at minimum distance `dmin` in `dim` dimensions.

 # Safety
 `out` must be writable.
 */
enum KqStatus kq_packing_radius(uint64_t n, double dmin, uint64_t dim, double *out);

/*
 Combined score `s + sqrt(i * e)`.
 */
double kq_knowledge_quality(double s, double i, double e);

/*
 Selects the `k` layers with the highest `Q` among `count` metrics
 handles and writes them in ascending order to `out_layers`.

 # Safety
 `metrics` must point to `count` live handles and `out_layers` to `k`
 writable integers.
 */
enum KqStatus kq_select_topk(const struct KqLayerMetrics *const *metrics,
                             size_t count,
                             size_t k,
                             uint32_t *out_layers);

/*
 Relative improvement of `acc_kd1` over `acc_kd2` against a baseline.

 # Safety
 `out` must be writable.
 */
enum KqStatus kq_ari(double acc_kd1, double acc_kd2, double acc_baseline, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* KQKIT_H */
