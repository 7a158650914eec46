#ifndef POPDNS_H
#define POPDNS_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PopdnsQtype {
  POPDNS_QTYPE_A = 1,
  POPDNS_QTYPE_AAAA = 2,
  POPDNS_QTYPE_CNAME = 3,
} PopdnsQtype;

typedef enum PopdnsScheme {
  POPDNS_SCHEME_DIRECT = 0,
  POPDNS_SCHEME_SINGLE_RELAY = 1,
  POPDNS_SCHEME_TOR3 = 2,
  POPDNS_SCHEME_POPDNS = 3,
} PopdnsScheme;

typedef enum PopdnsStatus {
  POPDNS_STATUS_OK = 0,
  POPDNS_STATUS_NULL_POINTER = 1,
  POPDNS_STATUS_INVALID_ARGUMENT = 2,
  POPDNS_STATUS_INVALID_SNAPSHOT = 3,
  POPDNS_STATUS_VERSION_GAP = 4,
  POPDNS_STATUS_MALFORMED_BATCH = 5,
  POPDNS_STATUS_NOT_FOUND = 6,
  POPDNS_STATUS_BUFFER_TOO_SMALL = 7,
  POPDNS_STATUS_PANIC = 99,
} PopdnsStatus;

/**
 * Opaque list replica.
 */
typedef struct PopdnsList PopdnsList;

typedef struct PopdnsExposureParams {
  double c;
  uint64_t users;
  uint64_t voters;
  double h;
  uint32_t rounds;
  double q_v;
  enum PopdnsScheme scheme;
} PopdnsExposureParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Parses a snapshot into a new list handle.
 *
 * # Safety
 * `data` must point to `len` readable bytes; `out` must be valid for one
 * write.
 */
enum PopdnsStatus popdns_list_parse(const uint8_t *data, size_t len, struct PopdnsList **out);

/**
 * Releases a handle. Null is ignored.
 *
 * # Safety
 * `list` must come from [`popdns_list_parse`] and not be used afterwards.
 */
void popdns_list_free(struct PopdnsList *list);

/**
 * # Safety
 * `list` must be a live handle; `version` and `entries` must be valid for
 * one write each when non-null.
 */
enum PopdnsStatus popdns_list_info(const struct PopdnsList *list,
                                   uint64_t *version,
                                   size_t *entries);

/**
 * Resolves `name` locally. On a hit the final answer is written as
 * NUL-terminated presentation text; `NotFound` signals a miss.
 *
 * # Safety
 * `list` must be a live handle, `name` a NUL-terminated string, `answer`
 * valid for `cap` writes when non-null and `answer_len` valid for one write
 * when non-null. The reported length excludes the terminator.
 */
enum PopdnsStatus popdns_list_lookup(const struct PopdnsList *list,
                                     const char *name,
                                     enum PopdnsQtype qtype,
                                     char *answer,
                                     size_t cap,
                                     size_t *answer_len);

/**
 * Applies one encoded update batch. The list is unchanged on error;
 * `VersionGap` means a fresh snapshot is needed.
 *
 * # Safety
 * `list` must be a live handle; `data` must point to `len` readable bytes.
 */
enum PopdnsStatus popdns_list_apply_batch(struct PopdnsList *list, const uint8_t *data, size_t len);

/**
 * Serializes the list. Pass a null buffer to learn the size.
 *
 * # Safety
 * `list` must be a live handle; `buf` valid for `cap` writes when non-null;
 * `out_len` valid for one write when non-null.
 */
enum PopdnsStatus popdns_list_serialize(const struct PopdnsList *list,
                                        uint8_t *buf,
                                        size_t cap,
                                        size_t *out_len);

/**
 * SHA-256 digest used to compare a replica with the server.
 *
 * # Safety
 * `list` must be a live handle; `out` must be valid for 32 writes.
 */
enum PopdnsStatus popdns_list_digest(const struct PopdnsList *list, uint8_t *out);

/**
 * # Safety
 * `params` must be readable and `out` writable.
 */
enum PopdnsStatus popdns_exposure(const struct PopdnsExposureParams *params, double *out);

/**
 * Monte Carlo estimate with its standard error.
 *
 * # Safety
 * `params` must be readable; `mean` and `stderr` writable.
 */
enum PopdnsStatus popdns_exposure_monte_carlo(const struct PopdnsExposureParams *params,
                                              uint64_t trials,
                                              uint64_t seed,
                                              double *mean,
                                              double *stderr);

/**
 * Copies the calling thread's last error message, NUL-terminated and
 * truncated to fit, and returns its full length without the terminator.
 *
 * # Safety
 * `buf` must be valid for `cap` writes when non-null.
 */
size_t popdns_last_error(char *buf, size_t cap);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* POPDNS_H */
