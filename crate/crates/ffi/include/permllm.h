#ifndef PERMLLM_H
#define PERMLLM_H

/* Generated by cbindgen; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible call.
 */
typedef enum PermllmStatus {
  PERMLLM_STATUS_OK = 0,
  PERMLLM_STATUS_INVALID_ARGUMENT = 1,
  PERMLLM_STATUS_NOT_FOUND = 2,
  PERMLLM_STATUS_AUTH_FAILED = 3,
  PERMLLM_STATUS_UNAVAILABLE = 4,
  PERMLLM_STATUS_INTERNAL = 5,
} PermllmStatus;

/**
 * Opaque handle: a loaded model, map, adapters and credential table.
 */
typedef struct PermllmEngineHandle PermllmEngineHandle;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message for the most recent failure on this thread. Valid until the next
 * failing call from the same thread.
 */
const char *permllm_last_error_message(void);

/**
 * Library version as a static string; do not free.
 */
const char *permllm_version(void);

/**
 * Frees a string returned by this library. Null is a no-op.
 *
 * # Safety
 * `s` must have been returned by a `permllm_*` call and not freed before.
 */
void permllm_string_free(char *s);

/**
 * Loads an artifact directory (model.pllm, model.vocab.json, adapters.pllm,
 * map.json) produced by the `permllm train` pipeline. On success stores an
 * engine handle in `out`.
 *
 * # Safety
 * `dir` must be a valid NUL-terminated string and `out` a valid pointer.
 */
enum PermllmStatus permllm_engine_open(const char *dir,
                                       bool expose_provenance,
                                       struct PermllmEngineHandle **out);

/**
 * Releases an engine handle. Null is a no-op.
 *
 * # Safety
 * `engine` must come from `permllm_engine_open` and not be used afterwards.
 */
void permllm_engine_close(struct PermllmEngineHandle *engine);

/**
 * Mints a credential bound to a comma-separated domain list (empty string
 * for the empty set). On success stores a token string in `out_token`;
 * free it with `permllm_string_free`.
 *
 * # Safety
 * Pointers must be valid; `engine` must be a live handle.
 */
enum PermllmStatus permllm_engine_register(struct PermllmEngineHandle *engine,
                                           const char *domains_csv,
                                           char **out_token);

/**
 * Runs one authenticated query. On success stores the generated text in
 * `out_response`; free it with `permllm_string_free`.
 *
 * # Safety
 * Pointers must be valid; `engine` must be a live handle.
 */
enum PermllmStatus permllm_engine_query(struct PermllmEngineHandle *engine,
                                        const char *token,
                                        const char *query,
                                        uintptr_t max_new_tokens,
                                        char **out_response);

/**
 * Scores a text under the token's activation and returns the per-token
 * trace as a JSON array of {logprob, mu, sigma} objects. Free the string
 * with `permllm_string_free`.
 *
 * # Safety
 * Pointers must be valid; `engine` must be a live handle.
 */
enum PermllmStatus permllm_engine_trace(struct PermllmEngineHandle *engine,
                                        const char *token,
                                        const char *text,
                                        char **out_trace_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PERMLLM_H */
