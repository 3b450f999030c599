#ifndef SEM_H
#define SEM_H

#include <stddef.h>
#include <stdint.h>

/*
 Status codes returned by every exported function.
 */
typedef enum SemStatus {
  SEM_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  SEM_STATUS_NULL_POINTER = 1,
  /*
   Bad argument or configuration value.
   */
  SEM_STATUS_INVALID_ARGUMENT = 2,
  /*
   Malformed file, I/O failure or mismatched dimensions.
   */
  SEM_STATUS_FORMAT = 3,
  /*
   Non-finite values, degenerate inputs or numeric failure.
   */
  SEM_STATUS_NUMERIC = 4,
  /*
   An internal panic was caught at the boundary.
   */
  SEM_STATUS_INTERNAL = 5,
} SemStatus;

/*
 Steering variant selector.
 */
typedef enum SemVariant {
  SEM_VARIANT_SEM_I = 0,
  SEM_VARIANT_SEM_B = 1,
  SEM_VARIANT_SEM_BI = 2,
} SemVariant;

/*
 Opaque SAE weights.
 */
typedef struct SemSae SemSae;

/*
 Opaque steering context: neutral activation, diverse pool and bias scores.
 */
typedef struct SemSteering SemSteering;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message for the most recent failure on this thread, or null. The pointer
 stays valid until the next call into this library on the same thread.
 */
const char *sem_last_error_message(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *sem_version(void);

/*
 Loads SEMW weights from `path` into a new handle.
 */
enum SemStatus sem_sae_load(const char *path, struct SemSae **out);

/*
 Builds a handle from an `s x d` encoder, a `d x s` decoder and a length-`d` bias.
 */
enum SemStatus sem_sae_from_parts(const double *encoder,
                                  const double *decoder,
                                  const double *centering_bias,
                                  size_t input_dim,
                                  size_t latent_dim,
                                  struct SemSae **out);

/*
 Writes the handle's weights to `path` as SEMW.
 */
enum SemStatus sem_sae_save(const struct SemSae *sae, const char *path);

/*
 Releases a handle; null is ignored.
 */
void sem_sae_free(struct SemSae *sae);

/*
 Embedding dimension `d`, or 0 for a null handle.
 */
size_t sem_sae_input_dim(const struct SemSae *sae);

/*
 Latent dimension `s`, or 0 for a null handle.
 */
size_t sem_sae_latent_dim(const struct SemSae *sae);

/*
 Encodes a length-`d` embedding into a length-`s` latent.
 */
enum SemStatus sem_sae_encode(const struct SemSae *sae,
                              const double *z,
                              size_t z_len,
                              double *h_out,
                              size_t h_len);

/*
 Decodes a length-`s` latent into a length-`d` embedding.
 */
enum SemStatus sem_sae_decode(const struct SemSae *sae,
                              const double *h,
                              size_t h_len,
                              double *z_out,
                              size_t z_len);

/*
 Keeps the `k` largest entries of `h` (ties to the lower index) and clamps at zero.
 */
enum SemStatus sem_topk_relu(const double *h, size_t len, size_t k, double *out);

/*
 Percentile of each coordinate of `probe` against `n_ref` reference rows of length `len`.
 */
enum SemStatus sem_percentile_score(const double *probe,
                                    size_t len,
                                    const double *reference,
                                    size_t n_ref,
                                    double *out);

/*
 Bias-agnostic modulation `M = S_concept^2`.
 */
enum SemStatus sem_modulation_agnostic(const double *s_concept, size_t len, double *out);

/*
 Bias-aware modulation `M = (1 + S_concept - S_bias)^2`.
 */
enum SemStatus sem_modulation_aware(const double *s_concept,
                                    const double *s_bias,
                                    size_t len,
                                    double *out);

/*
 `h * M + (1 - M) * m_div`, element-wise.
 */
enum SemStatus sem_steer(const double *h,
                         const double *modulation,
                         const double *m_div,
                         size_t len,
                         double *out);

/*
 Builds a steering context from raw embeddings. `diverse` holds `n_diverse`
 rows of length `d`; for bias-aware variants `bias` holds the concatenated
 prompt rows of `n_classes` classes with `class_counts[c]` rows each.
 */
enum SemStatus sem_steering_new(const struct SemSae *sae,
                                enum SemVariant variant,
                                const double *diverse,
                                size_t n_diverse,
                                const double *bias,
                                const size_t *class_counts,
                                size_t n_classes,
                                struct SemSteering **out);

/*
 Debiases one query embedding of length `d`. `paraphrases` holds
 `n_paraphrases` rows (required by `SemI` and `SemBi`). Output is
 L2-normalized unless `raw` is nonzero.
 */
enum SemStatus sem_steering_debias(const struct SemSteering *ctx,
                                   const struct SemSae *sae,
                                   const double *query,
                                   const double *paraphrases,
                                   size_t n_paraphrases,
                                   int32_t raw,
                                   double *out,
                                   size_t out_len);

void sem_steering_free(struct SemSteering *ctx);

/*
 KL@k of the group labels of a top-k list against `desired` (null = uniform).
 */
enum SemStatus sem_kl_at_k(const size_t *groups,
                           size_t k,
                           size_t n_groups,
                           const double *desired,
                           double *out);

/*
 MaxSkew@k of the group labels of a top-k list against `desired` (null = uniform).
 */
enum SemStatus sem_maxskew_at_k(const size_t *groups,
                                size_t k,
                                size_t n_groups,
                                const double *desired,
                                double *out);

/*
 Disentanglement score from pooled probe accuracies; `Numeric` when undefined.
 */
enum SemStatus sem_disentanglement_score(double acc_bp,
                                         double acc_b,
                                         double chance_b,
                                         double *raw_out,
                                         double *clamped_out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* SEM_H */
