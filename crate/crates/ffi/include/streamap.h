#ifndef STREAMAP_H
#define STREAMAP_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Status codes returned by every fallible function.
typedef enum SapStatus {
  SAP_STATUS_OK = 0,
  // Unreadable or malformed input, or an invalid argument.
  SAP_STATUS_MALFORMED = 2,
  // Referential-integrity violation in the inputs.
  SAP_STATUS_INTEGRITY = 3,
  // Internal invariant failure.
  SAP_STATUS_INTERNAL = 4,
  // A required pointer argument was null.
  SAP_STATUS_NULL_POINTER = 5,
  // A panic was caught at the boundary.
  SAP_STATUS_PANIC = 6,
} SapStatus;

// Values for the `policy` argument of `sap_simulate_constant`.
typedef enum SapPolicy {
  SAP_POLICY_LATEST_BLOCKING = 0,
  SAP_POLICY_QUEUE = 1,
} SapPolicy;

typedef struct SapDataset SapDataset;

typedef struct SapDetections SapDetections;

typedef struct SapTimeline SapTimeline;

// AP summary on a 0–100 scale; -1 marks strata without ground truth.
typedef struct SapApSummary {
  double ap;
  double ap50;
  double ap75;
  double ap_small;
  double ap_medium;
  double ap_large;
} SapApSummary;

// Box in `[x, y, width, height]` form.
typedef struct SapBox {
  double x;
  double y;
  double w;
  double h;
} SapBox;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failure on this thread, or null. The pointer stays
// valid until the next failing call on the same thread.
const char *sap_last_error_message(void);

// Library version as a static NUL-terminated string.
const char *sap_version(void);

// Loads a COCO ground-truth file; frame timestamps use `fps`.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SapStatus sap_dataset_load(const char *path, double fps, struct SapDataset **out);

// # Safety
// `d` must come from `sap_dataset_load` and not be freed twice.
void sap_dataset_free(struct SapDataset *d);

// # Safety
// `d` must be null or a live dataset handle.
size_t sap_dataset_image_count(const struct SapDataset *d);

// # Safety
// `d` must be null or a live dataset handle.
size_t sap_dataset_annotation_count(const struct SapDataset *d);

// Loads a COCO results array.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SapStatus sap_detections_load(const char *path, struct SapDetections **out);

// # Safety
// `d` must come from `sap_detections_load` and not be freed twice.
void sap_detections_free(struct SapDetections *d);

// # Safety
// `d` must be null or a live detections handle.
size_t sap_detections_count(const struct SapDetections *d);

// Simulates every sequence of `gt` with a constant latency in seconds;
// `policy` is a `SapPolicy` value.
//
// # Safety
// `gt` and `dets` must be live handles and `out` a writable pointer.
enum SapStatus sap_simulate_constant(const struct SapDataset *gt,
                                     const struct SapDetections *dets,
                                     double latency_seconds,
                                     double fps,
                                     int32_t policy,
                                     struct SapTimeline **out);

// Loads a timeline dump written by `sap_timeline_save` or the CLI.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a writable pointer.
enum SapStatus sap_timeline_load(const char *path, struct SapTimeline **out);

// # Safety
// `t` must be a live timeline handle and `path` a NUL-terminated string.
enum SapStatus sap_timeline_save(const struct SapTimeline *t, const char *path);

// # Safety
// `t` must be null or a live timeline handle.
size_t sap_timeline_len(const struct SapTimeline *t);

// # Safety
// `t` must come from this library and not be freed twice.
void sap_timeline_free(struct SapTimeline *t);

// Offline COCO AP with the default configuration.
//
// # Safety
// Handles must be live and `out` writable.
enum SapStatus sap_evaluate_offline(const struct SapDataset *gt,
                                    const struct SapDetections *dets,
                                    struct SapApSummary *out);

// Streaming AP with the default configuration.
//
// # Safety
// Handles must be live and `out` writable.
enum SapStatus sap_evaluate_streaming(const struct SapDataset *gt,
                                      const struct SapTimeline *timeline,
                                      struct SapApSummary *out);

// # Safety
// `out` must be writable.
enum SapStatus sap_iou(struct SapBox a, struct SapBox b, double *out);

// Fails with `Malformed` when both boxes have zero area.
//
// # Safety
// `out` must be writable.
enum SapStatus sap_giou(struct SapBox a, struct SapBox b, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* STREAMAP_H */
