#ifndef GLYPHREAD_H
#define GLYPHREAD_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result code of every fallible call.
typedef enum GrStatus {
  GR_STATUS_OK = 0,
  GR_STATUS_NULL_POINTER = 1,
  GR_STATUS_INVALID_ARGUMENT = 2,
  GR_STATUS_IO = 3,
  GR_STATUS_FORMAT = 4,
  GR_STATUS_SHAPE = 5,
  GR_STATUS_NUMERIC = 6,
  GR_STATUS_PANIC = 7,
} GrStatus;

// A loaded model bundle together with its optional LM and lexicon.
typedef struct GrModel GrModel;

// Ranked decode results.
typedef struct GrResult GrResult;

// Decoding options. Obtain defaults from [`gr_decode_options_default`].
typedef struct GrDecodeOptions {
  uint32_t beam_width;
  // Fuse the bundle's character LM (nonzero = on)
  uint8_t use_lm;
  double lm_weight;
  // Restrict output to the bundle's lexicon (nonzero = on)
  uint8_t use_lexicon;
  // 0 = trie pruning, 1 = nearest word by edit distance
  uint8_t lexicon_mode;
} GrDecodeOptions;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *gr_version(void);

// Message for the last failed call on this thread (empty after success).
// Valid until the next call on the same thread.
const char *gr_last_error_message(void);

struct GrDecodeOptions gr_decode_options_default(void);

// Loads a bundle from `path`. On success `*out` owns a handle to release
// with [`gr_model_free`].
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum GrStatus gr_model_load(const char *path, struct GrModel **out);

// # Safety
// `model` must come from [`gr_model_load`] and not be used afterwards.
void gr_model_free(struct GrModel *model);

// Decodes an 8-bit grayscale image of `height`×`width` pixels (row-major,
// 0 = black). `opts` may be null for defaults.
//
// # Safety
// `pixels` must point to `height * width` bytes; `model` must be a live
// handle and `out` a valid pointer.
enum GrStatus gr_decode(const struct GrModel *model,
                        const uint8_t *pixels,
                        size_t height,
                        size_t width,
                        const struct GrDecodeOptions *opts,
                        struct GrResult **out);

// Decodes a binary PGM file.
//
// # Safety
// As for [`gr_decode`]; `path` must be a NUL-terminated string.
enum GrStatus gr_decode_pgm(const struct GrModel *model,
                            const char *path,
                            const struct GrDecodeOptions *opts,
                            struct GrResult **out);

// Number of ranked results (0 for a null handle).
//
// # Safety
// `result` must be null or a live handle.
size_t gr_result_count(const struct GrResult *result);

// Word at `index` (best first), or null when out of range. Owned by the
// result handle.
//
// # Safety
// `result` must be null or a live handle.
const char *gr_result_word(const struct GrResult *result, size_t index);

// Log-score at `index`, or NaN when out of range.
//
// # Safety
// `result` must be null or a live handle.
double gr_result_score(const struct GrResult *result, size_t index);

// # Safety
// `result` must come from a decode call and not be used afterwards.
void gr_result_free(struct GrResult *result);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GLYPHREAD_H */
