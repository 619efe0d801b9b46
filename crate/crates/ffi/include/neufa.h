#ifndef NEUFA_H
#define NEUFA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum NeufaStatus {
  NEUFA_STATUS_OK = 0,
  NEUFA_STATUS_NULL_POINTER = 1,
  NEUFA_STATUS_INVALID_UTF8 = 2,
  NEUFA_STATUS_IO = 3,
  NEUFA_STATUS_CONFIG = 4,
  NEUFA_STATUS_INPUT = 5,
  NEUFA_STATUS_PARSE = 6,
  NEUFA_STATUS_FORMAT = 7,
  NEUFA_STATUS_SHAPE = 8,
  NEUFA_STATUS_CONTRACT = 9,
  NEUFA_STATUS_NON_FINITE = 10,
  NEUFA_STATUS_JSON = 11,
  NEUFA_STATUS_PANIC = 12,
} NeufaStatus;

/*
 Utterances with reference boundaries.
 */
typedef struct NeufaCorpus NeufaCorpus;

/*
 A trained or freshly initialised aligner.
 */
typedef struct NeufaModel NeufaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Message of the last failed call on this thread, or null. The pointer is
 valid until the next failing call on the same thread.
 */
const char *neufa_last_error(void);

/*
 Library version as a static NUL-terminated string.
 */
const char *neufa_version(void);

/*
 New model from a JSON configuration; null means all defaults.

 # Safety
 `config_json` is null or a NUL-terminated string; `out` is writable.
 */
enum NeufaStatus neufa_model_new(const char *config_json, struct NeufaModel **out);

/*
 Loads the model stored in a checkpoint file.

 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum NeufaStatus neufa_model_load(const char *path, struct NeufaModel **out);

/*
 Writes the model parameters (no optimizer state) to a checkpoint.

 # Safety
 `model` comes from this library; `path` is a NUL-terminated string.
 */
enum NeufaStatus neufa_model_save(const struct NeufaModel *model, const char *path);

/*
 # Safety
 `model` is null or a handle from this library not yet freed.
 */
void neufa_model_free(struct NeufaModel *model);

/*
 Aligns one utterance. `frames` holds `n_frames * d_mel` values row by
 row; `left_ms` and `right_ms` must have room for `n_text` values.

 # Safety
 All pointers are valid for the stated lengths.
 */
enum NeufaStatus neufa_align(const struct NeufaModel *model,
                             const size_t *tokens,
                             size_t n_text,
                             const double *frames,
                             size_t n_frames,
                             size_t d_mel,
                             double frame_shift_ms,
                             double *left_ms,
                             double *right_ms);

/*
 Loads a corpus file (one JSON utterance per line).

 # Safety
 `path` is a NUL-terminated string; `out` is writable.
 */
enum NeufaStatus neufa_corpus_load(const char *path, struct NeufaCorpus **out);

/*
 Synthetic corpus from a JSON spec; null means all defaults.

 # Safety
 `spec_json` is null or a NUL-terminated string; `out` is writable.
 */
enum NeufaStatus neufa_corpus_generate(const char *spec_json, struct NeufaCorpus **out);

/*
 # Safety
 `corpus` comes from this library; `path` is a NUL-terminated string.
 */
enum NeufaStatus neufa_corpus_save(const struct NeufaCorpus *corpus, const char *path);

/*
 Number of utterances, or 0 for a null handle.

 # Safety
 `corpus` is null or a live handle from this library.
 */
size_t neufa_corpus_len(const struct NeufaCorpus *corpus);

/*
 # Safety
 `corpus` is null or a handle from this library not yet freed.
 */
void neufa_corpus_free(struct NeufaCorpus *corpus);

/*
 Aligns every utterance into `out_dir` (TextGrids, attention CSVs and
 `alignments.jsonl`).

 # Safety
 Handles come from this library; `out_dir` is a NUL-terminated string.
 */
enum NeufaStatus neufa_align_corpus(const struct NeufaModel *model,
                                    const struct NeufaCorpus *corpus,
                                    const char *out_dir);

/*
 Pooled boundary errors of the predictions in `pred_dir` against the
 reference corpus. `accuracy` must have room for 4 values (10, 25, 50
 and 100 ms); it may be null.

 # Safety
 `corpus` comes from this library; the out pointers are writable.
 */
enum NeufaStatus neufa_evaluate(const char *pred_dir,
                                const struct NeufaCorpus *corpus,
                                double *mae_ms,
                                double *median_ms,
                                double *accuracy);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* NEUFA_H */
