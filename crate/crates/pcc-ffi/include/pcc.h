#ifndef PCC_H
#define PCC_H

/* Generated by cbindgen from pcc-ffi; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define PCC_OK 0

#define PCC_ERR_NULL_ARGUMENT 1

#define PCC_ERR_UTF8 2

#define PCC_ERR_CONFIG 3

#define PCC_ERR_PARSE 4

#define PCC_ERR_SHAPE 5

#define PCC_ERR_FORMAT 6

#define PCC_ERR_IO 7

#define PCC_ERR_NETWORK 8

#define PCC_ERR_DIVERGENCE 9

#define PCC_ERR_BUFFER_TOO_SMALL 10

#define PCC_ERR_PANIC 11

/**
 * Opaque handle over a category→tags cluster assignment.
 */
typedef struct PccClusterMap PccClusterMap;

/**
 * Opaque handle over a trained checkpoint, ready for inference.
 */
typedef struct PccModel PccModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message describing the most recent failure on this thread. Never NULL;
 * empty before any failure. The pointer stays valid until the next failing
 * call from the same thread.
 */
const char *pcc_last_error(void);

/**
 * Load a cluster map from the JSON file the `pcc cluster` command writes.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must point to writable
 * storage for one pointer. On success `*out` owns the map and must be
 * released with [`pcc_cluster_map_free`].
 */
int pcc_cluster_map_load(const char *path, struct PccClusterMap **out);

/**
 * Release a cluster map. NULL is a no-op.
 *
 * # Safety
 * `map` must come from [`pcc_cluster_map_load`] and not be freed twice.
 */
void pcc_cluster_map_free(struct PccClusterMap *map);

/**
 * Number of distinct cluster tags (the width of cluster vectors).
 *
 * # Safety
 * `map` must be a live handle; `out` must be writable.
 */
int pcc_cluster_map_num_clusters(const struct PccClusterMap *map, size_t *out);

/**
 * Project a comma-separated list of category names onto the cluster
 * vocabulary as a multi-hot byte vector (one byte per tag, 0 or 1).
 * `out_len` must equal the map's cluster count.
 *
 * # Safety
 * `map` must be a live handle; `labels_csv` a NUL-terminated string;
 * `out_bits` writable for `out_len` bytes.
 */
int pcc_cluster_map_vector(const struct PccClusterMap *map,
                           const char *labels_csv,
                           uint8_t *out_bits,
                           size_t out_len);

/**
 * Load a trained checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` writable for one pointer.
 * On success `*out` owns the model and must be released with
 * [`pcc_model_free`].
 */
int pcc_model_load(const char *path, struct PccModel **out);

/**
 * Release a model. NULL is a no-op.
 *
 * # Safety
 * `model` must come from [`pcc_model_load`] and not be freed twice.
 */
void pcc_model_free(struct PccModel *model);

/**
 * Total classes the model predicts, background included.
 *
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
int pcc_model_num_classes(const struct PccModel *model, size_t *out);

/**
 * Side length of the square input images the model was trained on.
 *
 * # Safety
 * `model` must be a live handle; `out` writable.
 */
int pcc_model_image_side(const struct PccModel *model, size_t *out);

/**
 * Copy the name of class `index` (0 is always "background") into `buf` as a
 * NUL-terminated string. Fails with `PCC_ERR_BUFFER_TOO_SMALL` if `buf_len`
 * cannot hold the name plus terminator.
 *
 * # Safety
 * `model` must be a live handle; `buf` writable for `buf_len` bytes.
 */
int pcc_model_class_name(const struct PccModel *model, size_t index, char *buf, size_t buf_len);

/**
 * Run single-image inference: patch predictions, bilinear upsampling,
 * optional CRF refinement against the image itself, and per-pixel argmax.
 *
 * `pixels` holds `height * width * 3` doubles in [0, 1], row-major RGB.
 * `out_labels` receives `height * width` class indices.
 *
 * For a model trained with cluster-token fusion, `map` and `labels_csv`
 * (the image-level category names) are required; otherwise both may be
 * NULL.
 *
 * # Safety
 * All pointers must satisfy the sizes above; `model`/`map` must be live
 * handles from this library.
 */
int pcc_model_predict_mask(const struct PccModel *model,
                           const struct PccClusterMap *map,
                           const char *labels_csv,
                           const double *pixels,
                           size_t height,
                           size_t width,
                           int apply_crf,
                           uint8_t *out_labels);

/**
 * Mean intersection-over-union between two label buffers of `len` pixels.
 * `ignore_label` < 0 scores every pixel; otherwise ground-truth pixels with
 * that value are skipped.
 *
 * # Safety
 * `pred` and `gt` must hold `len` bytes; `out` must be writable.
 */
int pcc_mean_iou(const uint8_t *pred,
                 const uint8_t *gt,
                 size_t len,
                 size_t num_classes,
                 int ignore_label,
                 double *out);

/**
 * Execute the whole pipeline (cluster map load, training, pseudo-label
 * generation, evaluation) from a run-config file, exactly like
 * `pcc run --config <path>`. On success writes reports under the config's
 * outputs directory and stores the final mean IoU in `out_mean_iou`
 * (pass NULL to discard it).
 *
 * # Safety
 * `config_path` must be a NUL-terminated string.
 */
int pcc_run_pipeline(const char *config_path, double *out_mean_iou);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PCC_H */
