#ifndef HEADSYNTH_H
#define HEADSYNTH_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every call.
 */
typedef enum HsStatus {
  HS_STATUS_OK = 0,
  HS_STATUS_NULL_POINTER = 1,
  HS_STATUS_INVALID_ARGUMENT = 2,
  HS_STATUS_CONTRACT = 3,
  HS_STATUS_PARSE = 4,
  HS_STATUS_VALIDATION = 5,
  HS_STATUS_IO = 6,
  HS_STATUS_PANIC = 7,
} HsStatus;

/**
 * Deformation field for one shape, expression and pose.
 */
typedef struct HsField HsField;

/**
 * Baked appearance of one identity (head and part tri-planes plus decoder).
 */
typedef struct HsIdentity HsIdentity;

/**
 * Procedural or loaded head rig.
 */
typedef struct HsRig HsRig;

/**
 * Orbit camera; angles in radians, field of view in degrees.
 */
typedef struct HsCamera {
  double pitch;
  double yaw;
  double roll;
  double radius;
  double look_at[3];
  double fov_deg;
} HsCamera;

/**
 * Unweighted loss terms; `re_perceptual`, `id` and `adv` are the hook-backed terms.
 */
typedef struct HsLossTerms {
  double re_l1;
  double re_perceptual;
  double f;
  double tri;
  double depth;
  double opa;
  double id;
  double adv;
} HsLossTerms;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread (empty after a successful call). The
 * pointer stays valid until the next call into the library from the same thread.
 */
const char *hs_last_error_message(void);

/**
 * Library version as a static NUL-terminated string.
 */
const char *hs_version(void);

/**
 * Builds the procedural rig (`small` selects the reduced tessellation).
 *
 * # Safety
 * `out` must be writable.
 */
enum HsStatus hs_rig_procedural(bool small, uint64_t seed, struct HsRig **out);

/**
 * # Safety
 * `path` must be a NUL-terminated string.
 */
enum HsStatus hs_rig_load(const char *path, struct HsRig **out);

/**
 * # Safety
 * `rig` must come from this library; `path` must be NUL-terminated.
 */
enum HsStatus hs_rig_save(const struct HsRig *rig, const char *path);

/**
 * Writes vertex count, triangle count, shape dimension and expression dimension.
 *
 * # Safety
 * `rig` must come from this library; `out` must hold 4 writable entries.
 */
enum HsStatus hs_rig_info(const struct HsRig *rig, size_t *out);

/**
 * # Safety
 * `rig` must be null or come from [`hs_rig_procedural`] / [`hs_rig_load`] and not be freed twice.
 */
void hs_rig_free(struct HsRig *rig);

/**
 * Bakes the seeded appearance of one identity at tri-plane resolution `resolution`.
 *
 * # Safety
 * `rig` must come from this library.
 */
enum HsStatus hs_identity_bake(const struct HsRig *rig,
                               uint64_t seed,
                               size_t resolution,
                               struct HsIdentity **out);

/**
 * # Safety
 * `identity` must be null or come from [`hs_identity_bake`] and not be freed twice.
 */
void hs_identity_free(struct HsIdentity *identity);

/**
 * Builds the deformation field. `alpha`/`beta` must have the rig's shape/expression sizes;
 * `pose` holds 9 values (eye, jaw, neck axis-angles).
 *
 * # Safety
 * Pointers must reference the stated number of readable values.
 */
enum HsStatus hs_field_new(const struct HsRig *rig,
                           const double *alpha,
                           size_t alpha_len,
                           const double *beta,
                           size_t beta_len,
                           const double *pose,
                           size_t grid_resolution,
                           struct HsField **out);

/**
 * Evaluates the head and part offsets at `x` (3 values each).
 *
 * # Safety
 * `x` must hold 3 readable values; `dx_head` and `dx_part` 3 writable values.
 */
enum HsStatus hs_field_eval(const struct HsField *field,
                            const double *x,
                            double *dx_head,
                            double *dx_part);

/**
 * # Safety
 * `field` must be null or come from [`hs_field_new`] and not be freed twice.
 */
void hs_field_free(struct HsField *field);

/**
 * Renders the blended foreground of `identity` through `field`. Writes `width·height·3`
 * RGB values and `width·height` opacities, rows top to bottom.
 *
 * # Safety
 * Handles must come from this library; `rgb` and `opacity` must be writable for the sizes
 * above. `alpha`, `beta` and `pose` as in [`hs_field_new`] (the mask uses the posed mesh).
 */
enum HsStatus hs_render(const struct HsRig *rig,
                        const struct HsIdentity *identity,
                        const struct HsField *field,
                        const double *alpha,
                        size_t alpha_len,
                        const double *beta,
                        size_t beta_len,
                        const double *pose,
                        const struct HsCamera *camera,
                        size_t width,
                        size_t height,
                        uint64_t seed,
                        double *rgb,
                        double *opacity);

/**
 * Generates a dataset (`is_static != 0` for a static set, which forces one motion).
 *
 * # Safety
 * `rig` must come from this library; `out_dir` must be NUL-terminated.
 */
enum HsStatus hs_dataset_generate(const struct HsRig *rig,
                                  bool is_static,
                                  size_t identities,
                                  size_t motions,
                                  size_t views,
                                  size_t resolution,
                                  uint64_t seed,
                                  const char *out_dir);

/**
 * Validates a dataset directory. `passed` receives 1 when every check passes; the failing
 * checks are reported through [`hs_last_error_message`] with status `Validation`.
 *
 * # Safety
 * `dir` must be NUL-terminated; `passed` writable.
 */
enum HsStatus hs_dataset_validate(const char *dir, bool *passed);

/**
 * Weighted total loss. `weights` holds the 7 balancing weights or is null for the defaults.
 *
 * # Safety
 * `terms` must be readable; `weights` null or 7 readable values; `total` writable.
 */
enum HsStatus hs_total_loss(const struct HsLossTerms *terms, const double *weights, double *total);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* HEADSYNTH_H */
