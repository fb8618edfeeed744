#ifndef GRSIO_H
#define GRSIO_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

#define GRSIO_OK 0

#define GRSIO_ERR_DIMENSION -1

#define GRSIO_ERR_DEGENERATE -2

#define GRSIO_ERR_INVALID_ARGUMENT -3

#define GRSIO_ERR_NON_FINITE -4

#define GRSIO_ERR_UNKNOWN_LABEL -5

#define GRSIO_ERR_PRECONDITION -6

#define GRSIO_ERR_CONFIG -7

#define GRSIO_ERR_IO -8

#define GRSIO_ERR_JSON -9

#define GRSIO_ERR_CSV -10

#define GRSIO_ERR_NULL -11

#define GRSIO_ERR_UTF8 -12

#define GRSIO_ERR_BUFFER -13

#define GRSIO_ERR_PANIC -14

// A resolved experiment configuration.
typedef struct GrsioConfig GrsioConfig;

// A multiplier family `σ ↦ m_σ`.
typedef struct GrsioMultiplier GrsioMultiplier;

// An oriented hyperplane, stored by its unit normal.
typedef struct GrsioSubspace GrsioSubspace;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *grsio_version(void);

// Copies the last error message of this thread into `buf` (NUL-terminated).
// Returns the message length without the terminator, or `GRSIO_ERR_BUFFER`
// if `cap` is too small; `buf` may be null to query the length.
//
// # Safety
// `buf` must be null or writable for `cap` bytes.
int grsio_last_error(char *buf, size_t cap);

// Hyperplane with the given normal in `ℝⁿ`, `n = len`.
//
// # Safety
// `normal` must hold `len` values; `out` must be writable.
int grsio_subspace_new(const double *normal, size_t len, struct GrsioSubspace **out);

// # Safety
// `s` must be null or a live handle from [`grsio_subspace_new`].
void grsio_subspace_free(struct GrsioSubspace *s);

// Ambient dimension `n`, or 0 for a null handle.
//
// # Safety
// `s` must be null or a live handle.
size_t grsio_subspace_dim(const struct GrsioSubspace *s);

// Copies the unit normal into `out` (`cap ≥ n`).
//
// # Safety
// `s` must be a live handle; `out` writable for `cap` values.
int grsio_subspace_normal(const struct GrsioSubspace *s, double *out, size_t cap);

// `dist(σ, τ) = |v_σ − v_τ|`.
//
// # Safety
// Both handles must be live; `out` writable.
int grsio_dist(const struct GrsioSubspace *a, const struct GrsioSubspace *b, double *out);

// The rotation `O_{σ,τ}` as an `n × n` row-major matrix in `out` (`cap ≥ n²`).
//
// # Safety
// Both handles must be live; `out` writable for `cap` values.
int grsio_rotation_between(const struct GrsioSubspace *a,
                           const struct GrsioSubspace *b,
                           double *out,
                           size_t cap);

// Built-in multiplier family by label, e.g. `"hilbert_smoothed(0.05)"`, on `ℝ^d`.
//
// # Safety
// `label` must be a NUL-terminated string; `out` writable.
int grsio_multiplier_new(const char *label, size_t d, struct GrsioMultiplier **out);

// # Safety
// `m` must be null or a live handle from [`grsio_multiplier_new`].
void grsio_multiplier_free(struct GrsioMultiplier *m);

// `m_σ(η)` for `η ∈ ℝ^d`, written as real and imaginary parts.
//
// # Safety
// Handles must be live; `eta` must hold `len` values; outputs writable.
int grsio_multiplier_eval(const struct GrsioMultiplier *m,
                          const struct GrsioSubspace *sigma,
                          const double *eta,
                          size_t len,
                          double *re,
                          double *im);

// Parses and validates a JSON experiment config.
//
// # Safety
// `json` must be a NUL-terminated string; `out` writable.
int grsio_config_from_json(const char *json, struct GrsioConfig **out);

// # Safety
// `c` must be null or a live handle from [`grsio_config_from_json`].
void grsio_config_free(struct GrsioConfig *c);

// Runs the named command (e.g. `"geometry_selftest"`) with outputs in `out_dir`.
// `passed` receives 1 when every check passed and 0 otherwise.
//
// # Safety
// `c` must be live; strings NUL-terminated; `passed` writable.
int grsio_run(const char *command, const struct GrsioConfig *c, const char *out_dir, int *passed);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* GRSIO_H */
