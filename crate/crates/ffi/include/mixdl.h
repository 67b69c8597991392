#ifndef MIXDL_H
#define MIXDL_H

/* Generated with cbindgen:0.29.4 */

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MixdlStatus {
  MIXDL_STATUS_OK = 0,
  MIXDL_STATUS_NULL_POINTER = 1,
  MIXDL_STATUS_PARAMETER = 2,
  MIXDL_STATUS_NUMERICAL_DOMAIN = 3,
  MIXDL_STATUS_CONFIGURATION = 4,
  MIXDL_STATUS_INGESTION = 5,
  MIXDL_STATUS_IO = 6,
  MIXDL_STATUS_CHECKPOINT = 7,
  MIXDL_STATUS_NON_FINITE = 8,
  MIXDL_STATUS_UTF8 = 9,
  MIXDL_STATUS_PANIC = 10,
} MixdlStatus;

typedef enum MixdlCoefficientSource {
  MIXDL_COEFFICIENT_SOURCE_DIRICHLET = 0,
  MIXDL_COEFFICIENT_SOURCE_GAUSSIAN = 1,
  MIXDL_COEFFICIENT_SOURCE_UNIFORM = 2,
} MixdlCoefficientSource;

/**
 * Opaque generator loaded from a checkpoint.
 */
typedef struct MixdlGenerator MixdlGenerator;

/**
 * Opaque trainer built from a run config.
 */
typedef struct MixdlTrainer MixdlTrainer;

/**
 * One training step's losses; `phase` is 0 for adversarial, 1 for mixup.
 */
typedef struct MixdlStepRecord {
  uint64_t step;
  uint32_t phase;
  double adv_g;
  double adv_d;
  double dist_g;
  double dist_d;
  double r1;
} MixdlStepRecord;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copies the calling thread's last error message into `buf` (NUL
 * terminated, truncated to `len`). Returns the full message length
 * excluding the terminator.
 */
size_t mixdl_last_error_message(char *buf, size_t len);

/**
 * NUL-terminated library version; static storage.
 */
const char *mixdl_version(void);

/**
 * Draws `n` simplex weights into `out[n]`. `alpha` has 1 or `n` entries.
 */
enum MixdlStatus mixdl_sample_coefficients(size_t n,
                                           enum MixdlCoefficientSource source,
                                           const double *alpha,
                                           size_t alpha_len,
                                           uint64_t seed,
                                           double *out);

/**
 * `out[dim] = sum_i coeff[i] * latents[i]` for `latents[n][dim]`.
 */
enum MixdlStatus mixdl_anchor_latent(const double *latents,
                                     size_t n,
                                     size_t dim,
                                     const double *coeff,
                                     double *out);

/**
 * Softmax of the coefficients into `out[n]`.
 */
enum MixdlStatus mixdl_target_distribution(const double *coeff, size_t n, double *out);

/**
 * Softmax over cosine similarities of `anchor[dim]` to each of
 * `batch[n][dim]`, into `out[n]`.
 */
enum MixdlStatus mixdl_similarity_profile(const double *anchor,
                                          const double *batch,
                                          size_t n,
                                          size_t dim,
                                          double *out);

/**
 * `KL(q || p)` over `n`-entry distributions.
 */
enum MixdlStatus mixdl_kl_divergence(const double *q, const double *p, size_t n, double *out);

/**
 * Generator distance loss over `layers` equally wide layers:
 * `anchors[layers][dim]`, `batch[layers][n][dim]`, `coeff[n]`.
 */
enum MixdlStatus mixdl_generator_distance_loss(const double *anchors,
                                               const double *batch,
                                               size_t layers,
                                               size_t n,
                                               size_t dim,
                                               const double *coeff,
                                               double *out);

/**
 * Fréchet distance between `a[na][dim]` and `b[nb][dim]`.
 */
enum MixdlStatus mixdl_frechet_distance(const double *a,
                                        size_t na,
                                        const double *b,
                                        size_t nb,
                                        size_t dim,
                                        double *out);

enum MixdlStatus mixdl_knn_precision_recall(const double *real,
                                            size_t n_real,
                                            const double *fake,
                                            size_t n_fake,
                                            size_t dim,
                                            size_t k,
                                            double *precision,
                                            double *recall);

/**
 * Loads the generator from a checkpoint file.
 */
enum MixdlStatus mixdl_generator_load(const char *path, struct MixdlGenerator **out);

void mixdl_generator_free(struct MixdlGenerator *handle);

/**
 * Latent width, or 0 for a null handle.
 */
size_t mixdl_generator_latent_dim(const struct MixdlGenerator *handle);

/**
 * Output side length in pixels, or 0 for a null handle.
 */
size_t mixdl_generator_resolution(const struct MixdlGenerator *handle);

/**
 * Renders `z[n][latent_dim]` into `out[n][3][res][res]`, values in [-1, 1].
 */
enum MixdlStatus mixdl_generator_generate(const struct MixdlGenerator *handle,
                                          const double *z,
                                          size_t n,
                                          double *out);

/**
 * Builds a trainer from a TOML run config file.
 */
enum MixdlStatus mixdl_trainer_new(const char *config_path, struct MixdlTrainer **out);

void mixdl_trainer_free(struct MixdlTrainer *handle);

/**
 * Runs one step (adversarial or mixup, alternating).
 */
enum MixdlStatus mixdl_trainer_step(struct MixdlTrainer *handle, struct MixdlStepRecord *record);

enum MixdlStatus mixdl_trainer_save(const struct MixdlTrainer *handle, const char *path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MIXDL_H */
