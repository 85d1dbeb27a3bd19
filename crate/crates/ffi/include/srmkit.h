#ifndef SRMKIT_H
#define SRMKIT_H

#include <stddef.h>
#include <stdint.h>

typedef enum SrmkitAlgorithm {
  SRMKIT_ALGORITHM_DETSRM = 0,
  SRMKIT_ALGORITHM_PROBSRM = 1,
  SRMKIT_ALGORITHM_FASTSRM = 2,
} SrmkitAlgorithm;

typedef enum SrmkitAtlasKind {
  SRMKIT_ATLAS_KIND_PARTITION = 0,
  SRMKIT_ATLAS_KIND_PROBABILISTIC = 1,
} SrmkitAtlasKind;

typedef enum SrmkitStatus {
  SRMKIT_STATUS_OK = 0,
  SRMKIT_STATUS_NULL_POINTER = 1,
  SRMKIT_STATUS_IO = 2,
  SRMKIT_STATUS_FORMAT = 3,
  SRMKIT_STATUS_DIMENSION = 4,
  SRMKIT_STATUS_INVALID_INPUT = 5,
  SRMKIT_STATUS_NON_FINITE = 6,
  SRMKIT_STATUS_CONFIG = 7,
  SRMKIT_STATUS_PANIC = 8,
} SrmkitStatus;

/*
 Opaque fitted model.
 */
typedef struct SrmkitModel SrmkitModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or NULL. The pointer
 stays valid until the next srmkit call on the same thread.
 */
const char *srmkit_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *srmkit_version(void);

/*
 Fits a model on the runs listed in a manifest. `atlas_path` may be NULL
 except for FastSRM. FastSRM components are kept in memory.

 # Safety
 String arguments must be NUL-terminated; `out` must be writable.
 */
enum SrmkitStatus srmkit_fit(enum SrmkitAlgorithm algorithm,
                             const char *manifest_path,
                             const char *atlas_path,
                             enum SrmkitAtlasKind atlas_kind,
                             size_t k,
                             size_t n_iter,
                             size_t n_jobs,
                             uint64_t seed,
                             struct SrmkitModel **out);

/*
 Opens a model directory; components are read into memory.

 # Safety
 `dir` must be NUL-terminated; `out` must be writable.
 */
enum SrmkitStatus srmkit_model_load(const char *dir, struct SrmkitModel **out);

/*
 # Safety
 `model` must come from this library; `dir` must be NUL-terminated.
 */
enum SrmkitStatus srmkit_model_save(const struct SrmkitModel *model, const char *dir);

/*
 Releases a model. NULL is ignored.

 # Safety
 `model` must come from this library and not be used afterwards.
 */
void srmkit_model_free(struct SrmkitModel *model);

/*
 Writes `k`, the subject count and the voxel count.

 # Safety
 `model` must be a live handle; each out pointer may be NULL.
 */
enum SrmkitStatus srmkit_model_shape(const struct SrmkitModel *model,
                                     size_t *k,
                                     size_t *n_subjects,
                                     size_t *n_voxels);

/*
 # Safety
 `model` must be a live handle; `out` must be writable.
 */
enum SrmkitStatus srmkit_model_algorithm(const struct SrmkitModel *model,
                                         enum SrmkitAlgorithm *out);

/*
 Copies subject `subject`'s k×v components into `out` (`len` = k·v).

 # Safety
 `model` must be a live handle; `out` must hold `len` doubles.
 */
enum SrmkitStatus srmkit_model_component(const struct SrmkitModel *model,
                                         size_t subject,
                                         double *out,
                                         size_t len);

/*
 Shared response of one run: the mean over `subjects` of `X_i W_iᵀ`.
 `runs[j]` is subject `subjects[j]`'s t×v run; `out` receives t×k.

 # Safety
 `runs` and `subjects` must hold `n_selected` entries, each run `t·v`
 doubles; `out` must hold `t·k` doubles.
 */
enum SrmkitStatus srmkit_transform(const struct SrmkitModel *model,
                                   const size_t *subjects,
                                   const double *const *runs,
                                   size_t n_selected,
                                   size_t t,
                                   double *out);

/*
 Predicted t×v data `S W_i` of one subject from a t×k shared response.

 # Safety
 `shared` must hold `t·k` doubles and `out` `t·v` doubles.
 */
enum SrmkitStatus srmkit_reconstruct(const struct SrmkitModel *model,
                                     size_t subject,
                                     const double *shared,
                                     size_t t,
                                     double *out);

/*
 R² of a prediction; `degenerate` (may be NULL) is set to 1 when the
 truth is constant, in which case the score is 0.

 # Safety
 `pred` and `truth` must hold `len` doubles; `score` must be writable.
 */
enum SrmkitStatus srmkit_r2_score(const double *pred,
                                  const double *truth,
                                  size_t len,
                                  double *score,
                                  int32_t *degenerate);

/*
 Orthonormal Procrustes solution `U V` of a k×v matrix `m = U D V`.

 # Safety
 `m` and `out` must each hold `k·v` doubles.
 */
enum SrmkitStatus srmkit_procrustes(const double *m, size_t k, size_t v, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SRMKIT_H */
