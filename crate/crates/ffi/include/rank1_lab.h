#ifndef RANK1_LAB_H
#define RANK1_LAB_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Result of every fallible call.
 */
typedef enum R1Status {
  R1_STATUS_OK = 0,
  R1_STATUS_NULL_POINTER = 1,
  R1_STATUS_INVALID_ARGUMENT = 2,
  R1_STATUS_UNKNOWN_INSTANCE = 3,
  R1_STATUS_VALIDATION = 4,
  R1_STATUS_NO_JOIN_FOUND = 5,
  R1_STATUS_CAP_EXCEEDED = 6,
  R1_STATUS_NUMERIC = 7,
  R1_STATUS_PANIC = 8,
} R1Status;

/**
 * Oracle used to join consecutive stages.
 */
typedef enum R1Mode {
  R1_MODE_SYNTHETIC = 0,
  R1_MODE_SL2 = 1,
} R1Mode;

/**
 * A registry instance.
 */
typedef struct R1Params R1Params;

/**
 * A built tree.
 */
typedef struct R1Tree R1Tree;

/**
 * Bounds on the dimension of the points diverging on average.
 */
typedef struct R1DimBounds {
  double lower;
  double upper;
  /**
   * NaN when only bounds are known.
   */
  double exact;
  double conjecture;
} R1DimBounds;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Copy the last error message of this thread into `buf` (NUL-terminated,
 * truncated to `len - 1` bytes). Returns the full message length.
 *
 * # Safety
 * `buf` must be null or point to `len` writable bytes.
 */
size_t r1_last_error(char *buf, size_t len);

/**
 * Look up a registry instance (`rhck<n>`, `rhp<n>`, `su21`).
 *
 * # Safety
 * `name` must be a NUL-terminated string and `out` a valid pointer.
 */
enum R1Status r1_params_lookup(const char *name, struct R1Params **out);

/**
 * # Safety
 * `p` must come from [`r1_params_lookup`] and not be used afterwards.
 */
void r1_params_free(struct R1Params *p);

/**
 * `p1`, `p2` and the maximal entropy `h_m = p1/2 + p2`.
 *
 * # Safety
 * `p` must be a live handle; each output pointer may be null.
 */
enum R1Status r1_params_dims(const struct R1Params *p, size_t *p1, size_t *p2, double *h_m);

/**
 * # Safety
 * `p` must be a live handle and `out` a valid pointer.
 */
enum R1Status r1_hausdorff_bounds(const struct R1Params *p, struct R1DimBounds *out);

/**
 * Cusp height after `k` steps of the orbit with A-coordinate `r` and
 * U-part `(z, x)` (`nz = p2`, `nx = p1` entries).
 *
 * # Safety
 * `z` and `x` must point to `nz` and `nx` readable doubles (or be null
 * when the count is zero); `out` must be valid.
 */
enum R1Status r1_height_at(const struct R1Params *p,
                           double r,
                           const double *z,
                           size_t nz,
                           const double *x,
                           size_t nx,
                           uint64_t k,
                           double *out);

/**
 * Running Frostman ratio at stage `n` for the growing schedule with
 * joining time `rprime`, using the quoted diameter bound.
 *
 * # Safety
 * `p` must be a live handle and `out` a valid pointer.
 */
enum R1Status r1_frostman_ratio(const struct R1Params *p, uint32_t n, uint32_t rprime, double *out);

/**
 * Build a tree of the given depth. `rprime = 0` lets the SL2 oracle pick
 * the joining time; synthetic trees need an explicit one.
 *
 * # Safety
 * `p` must be a live handle and `out` a valid pointer.
 */
enum R1Status r1_tree_build(const struct R1Params *p,
                            uint32_t depth,
                            enum R1Mode mode,
                            uint64_t seed,
                            uint32_t rprime,
                            struct R1Tree **out);

/**
 * # Safety
 * `t` must come from [`r1_tree_build`] and not be used afterwards.
 */
void r1_tree_free(struct R1Tree *t);

/**
 * Number of nodes at `depth` (1-based) and the joining time used.
 *
 * # Safety
 * `t` must be a live handle; output pointers may be null.
 */
enum R1Status r1_tree_info(const struct R1Tree *t, uint32_t depth, size_t *nodes, uint32_t *rprime);

/**
 * Coordinates `(Z, X)` of node `id` at `depth`, written to `buf`
 * (`len >= p1 + p2`).
 *
 * # Safety
 * `t` must be a live handle and `buf` must hold `len` doubles.
 */
enum R1Status r1_tree_point(const struct R1Tree *t,
                            uint32_t depth,
                            size_t id,
                            double *buf,
                            size_t len);

/**
 * Run the structural checks; `passed` receives 1 or 0. A failed check is
 * not an error: the call still returns `Ok`.
 *
 * # Safety
 * `t` must be a live handle and `passed` valid.
 */
enum R1Status r1_tree_check(const struct R1Tree *t, uint64_t seed, int32_t *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* RANK1_LAB_H */
