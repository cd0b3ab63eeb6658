/* Generated by cbindgen; do not edit. */

#ifndef MKPROMPT_H
#define MKPROMPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum MkpStatus {
  MKP_OK = 0,
  MKP_NULL_ARGUMENT = 1,
  MKP_INVALID_UTF8 = 2,
  MKP_IO = 3,
  MKP_FORMAT = 4,
  MKP_INVALID_ARGUMENT = 5,
  MKP_MODEL = 6,
  MKP_PANIC = 7,
} MkpStatus;

/**
 * Trained model with its vocabulary and, optionally, its BPE merges.
 */
typedef struct MkpModel MkpModel;

/**
 * Terminology dictionary compiled for soft matching.
 */
typedef struct MkpTermMatcher MkpTermMatcher;

/**
 * Translation memory with fuzzy-match retrieval.
 */
typedef struct MkpTmIndex MkpTmIndex;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the last failed call on this thread, or NULL after a
 * successful one. Valid until the next call into the library.
 */
const char *mkp_last_error(void);

void mkp_string_free(char *s);

/**
 * Static version string; do not free.
 */
const char *mkp_version(void);

/**
 * Token-level fuzzy-match similarity of two sentences, in [0, 1].
 */
enum MkpStatus mkp_similarity(const char *a, const char *b, double *out);

/**
 * Builds a memory from two newline-separated documents of equal length.
 */
enum MkpStatus mkp_tm_from_text(const char *source, const char *target, struct MkpTmIndex **out);

enum MkpStatus mkp_tm_load(const char *source_path,
                           const char *target_path,
                           struct MkpTmIndex **out);

/**
 * Number of entries, or 0 for NULL.
 */
size_t mkp_tm_len(const struct MkpTmIndex *tm);

/**
 * Best entry strictly above `lambda` as a JSON object
 * `{"id", "score", "src", "tgt"}`, or the JSON literal `null`.
 */
enum MkpStatus mkp_tm_retrieve(const struct MkpTmIndex *tm,
                               const char *query,
                               double lambda,
                               char **out_json);

void mkp_tm_free(struct MkpTmIndex *tm);

/**
 * Compiles a tab-separated dictionary (`source<TAB>target` per line).
 */
enum MkpStatus mkp_terms_from_tsv(const char *tsv, struct MkpTermMatcher **out);

enum MkpStatus mkp_terms_load(const char *path, struct MkpTermMatcher **out);

/**
 * Dictionary entries found in the pair, as a JSON array of
 * `[source, target]` string pairs.
 */
enum MkpStatus mkp_terms_match(const struct MkpTermMatcher *matcher,
                               const char *source,
                               const char *target,
                               char **out_json);

void mkp_terms_free(struct MkpTermMatcher *matcher);

/**
 * Loads a checkpoint and the vocabulary it was trained with. `bpe_path`
 * may be NULL when callers pass inputs already split into subword units.
 */
enum MkpStatus mkp_model_load(const char *checkpoint_path,
                              const char *vocab_path,
                              const char *bpe_path,
                              struct MkpModel **out);

/**
 * Translates a prompted input (knowledge blocks followed by `[Input]` and
 * the sentence). `prefix` is the forced decoder prefix, for example
 * `[Term] ... [Output]`; NULL or empty forces `[Output]` only. Writes the
 * translation as a space-separated line.
 */
enum MkpStatus mkp_model_translate(const struct MkpModel *model,
                                   const char *input,
                                   const char *prefix,
                                   size_t beam_size,
                                   char **out_text);

void mkp_model_free(struct MkpModel *model);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MKPROMPT_H */
