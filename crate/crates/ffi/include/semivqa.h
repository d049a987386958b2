#ifndef SEMIVQA_H
#define SEMIVQA_H

/* Generated by cbindgen from src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>
#include <stdbool.h>

typedef enum {
  SEMIVQA_STATUS_OK = 0,
  SEMIVQA_STATUS_NULL_ARGUMENT = 1,
  SEMIVQA_STATUS_INVALID_UTF8 = 2,
  SEMIVQA_STATUS_PARSE = 3,
  SEMIVQA_STATUS_INVALID_ARGUMENT = 4,
  SEMIVQA_STATUS_IO = 5,
  SEMIVQA_STATUS_OUT_OF_RANGE = 6,
  SEMIVQA_STATUS_EMPTY_POOL = 7,
  SEMIVQA_STATUS_PANIC = 99,
} SemivqaStatus;

// A loaded set of records.
typedef struct SemivqaCorpus SemivqaCorpus;

// A validated scene graph.
typedef struct SemivqaGraph SemivqaGraph;

// Message of the last failed call on this thread, or null. The pointer
// stays valid until the next call into the library on the same thread.
const char *semivqa_last_error(void);

// Library version as a static string.
const char *semivqa_version(void);

// # Safety
// `s` is null or was returned by this library and not yet freed.
void semivqa_string_free(char *s);

// Parses JSONL records.
//
// # Safety
// `jsonl` is a nul-terminated string; `out` is valid for a write.
SemivqaStatus semivqa_corpus_from_jsonl(const char *jsonl, SemivqaCorpus **out);

// Reads a JSONL file, or a DriveLM-style JSON file when `labeled` is true.
//
// # Safety
// `path` is a nul-terminated string; `out` is valid for a write.
SemivqaStatus semivqa_corpus_load(const char *path, bool labeled, SemivqaCorpus **out);

// # Safety
// `corpus` is null or a live handle.
void semivqa_corpus_free(SemivqaCorpus *corpus);

// # Safety
// `corpus` is a live handle; `out` is valid for a write.
SemivqaStatus semivqa_corpus_len(const SemivqaCorpus *corpus, uintptr_t *out);

// Record `index` as one JSON line.
//
// # Safety
// `corpus` is a live handle; `out` is valid for a write.
SemivqaStatus semivqa_corpus_record_json(const SemivqaCorpus *corpus, uintptr_t index, char **out);

// The whole corpus in canonical JSONL.
//
// # Safety
// `corpus` is a live handle; `out` is valid for a write.
SemivqaStatus semivqa_corpus_to_jsonl(const SemivqaCorpus *corpus, char **out);

// SHA-256 of the canonical JSONL, hex encoded.
//
// # Safety
// `corpus` is a live handle; `out` is valid for a write.
SemivqaStatus semivqa_corpus_digest(const SemivqaCorpus *corpus, char **out);

// Evaluates predictions against ground truth with the default weights
// and the surrogate judge; writes the report as JSON.
//
// # Safety
// Both handles are live; `out` is valid for a write.
SemivqaStatus semivqa_evaluate(const SemivqaCorpus *gt, const SemivqaCorpus *pred, char **out);

// # Safety
// `json` is a nul-terminated string; `out` is valid for a write.
SemivqaStatus semivqa_graph_from_json(const char *json, SemivqaGraph **out);

// # Safety
// `graph` is null or a live handle.
void semivqa_graph_free(SemivqaGraph *graph);

// # Safety
// `graph` is a live handle; `out` is valid for a write.
SemivqaStatus semivqa_graph_to_json(const SemivqaGraph *graph, char **out);

// # Safety
// `graph` is a live handle; the out-pointers are valid for writes.
SemivqaStatus semivqa_graph_counts(const SemivqaGraph *graph, uintptr_t *nodes, uintptr_t *edges);

// Samples up to `k` hints about `node_id` for a question on `target`
// (an attribution or relation name; relations also need `peer_id`, which
// may otherwise be null) and writes the rendered hint sentence.
//
// # Safety
// `graph` is a live handle; strings are nul-terminated or, for
// `peer_id`, null; `out` is valid for a write.
SemivqaStatus semivqa_graph_hints(const SemivqaGraph *graph,
                                  const char *node_id,
                                  const char *target,
                                  const char *peer_id,
                                  uintptr_t k,
                                  uint64_t seed,
                                  char **out);

// Parses `<id,CAM,x,y>` and writes it back as JSON.
//
// # Safety
// `reference` is a nul-terminated string; `out` is valid for a write.
SemivqaStatus semivqa_parse_object_ref(const char *reference, char **out);

// Consistency of two answers under the hash embedder: clamp(cos, 0, 1).
//
// # Safety
// Strings are nul-terminated; `out` is valid for a write.
SemivqaStatus semivqa_consistency(const char *a, const char *b, uintptr_t dim, double *out);

// Sentence BLEU-`n`, `n` in 1..=4.
//
// # Safety
// Strings are nul-terminated; `out` is valid for a write.
SemivqaStatus semivqa_bleu(const char *gt, const char *pred, uint32_t n, double *out);

// # Safety
// Strings are nul-terminated; `out` is valid for a write.
SemivqaStatus semivqa_rouge_l(const char *gt, const char *pred, double *out);

// CIDEr over `len` parallel arrays of sentences.
//
// # Safety
// `gt` and `pred` point to `len` nul-terminated strings each.
SemivqaStatus semivqa_cider(const char *const *gt,
                            const char *const *pred,
                            uintptr_t len,
                            double *out);

// Final score with explicit weights. `judge` and `match_score` are on
// the 0-100 scale, the others on 0-1.
//
// # Safety
// `out` is valid for a write.
SemivqaStatus semivqa_final_score(double accuracy,
                                  double judge,
                                  double language,
                                  double match_score,
                                  double w_accuracy,
                                  double w_judge,
                                  double w_language,
                                  double w_match,
                                  double *out);

#endif  /* SEMIVQA_H */
