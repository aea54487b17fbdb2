#ifndef LPARETO_H
#define LPARETO_H

#include <stddef.h>
#include <stdint.h>

// Return-level definition.
typedef enum LpMethod {
  // Expected number of exceedances.
  LP_METHOD_ENE = 0,
  // Expected waiting time.
  LP_METHOD_EWT = 1,
} LpMethod;

// Result codes shared by every function.
typedef enum LpStatus {
  LP_STATUS_OK = 0,
  LP_STATUS_NULL_POINTER = 1,
  LP_STATUS_INVALID_UTF8 = 2,
  LP_STATUS_PARSE = 3,
  LP_STATUS_INVALID_INPUT = 4,
  LP_STATUS_DOMAIN = 5,
  LP_STATUS_INSUFFICIENT_DATA = 6,
  LP_STATUS_NON_CONVERGENCE = 7,
  LP_STATUS_NUMERICAL = 8,
  LP_STATUS_CONFIG = 9,
  LP_STATUS_IO = 10,
  LP_STATUS_OUT_OF_RANGE = 11,
  LP_STATUS_BUFFER_TOO_SMALL = 12,
  LP_STATUS_PANIC = 13,
} LpStatus;

// Opaque fitted model.
typedef struct LpBundle LpBundle;

// Fitted marginal and trend parameters of one station.
typedef struct LpSiteParams {
  double a_n;
  double b_n;
  double gamma;
  double theta;
  double phi_u;
} LpSiteParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *lp_version(void);

// Message of the last failed call on this thread, or null. The pointer is
// valid until the next call on the same thread.
const char *lp_last_error_message(void);

// Loads a bundle from a JSON file.
//
// # Safety
// `path` must be a NUL-terminated string and `out` a valid pointer.
enum LpStatus lp_bundle_load(const char *path, struct LpBundle **out);

// Parses a bundle from JSON text.
//
// # Safety
// `json` must be a NUL-terminated string and `out` a valid pointer.
enum LpStatus lp_bundle_from_json(const char *json, struct LpBundle **out);

// Releases a bundle. Null is ignored.
//
// # Safety
// `bundle` must come from this library and not be used afterwards.
void lp_bundle_free(struct LpBundle *bundle);

// Number of stations in the bundle.
//
// # Safety
// `bundle` and `out` must be valid pointers.
enum LpStatus lp_bundle_n_sites(const struct LpBundle *bundle, size_t *out);

// Copies the station id of `site` into `buf` (NUL-terminated). On
// [`LpStatus::BufferTooSmall`], `needed` holds the required size.
//
// # Safety
// `buf` must have room for `len` bytes; `needed` may be null.
enum LpStatus lp_bundle_site_id(const struct LpBundle *bundle,
                                size_t site,
                                char *buf,
                                size_t len,
                                size_t *needed);

// Fitted parameters of one station.
//
// # Safety
// `bundle` and `out` must be valid pointers.
enum LpStatus lp_bundle_site_params(const struct LpBundle *bundle,
                                    size_t site,
                                    struct LpSiteParams *out);

// Fitted Brown-Resnick variogram `(τ, κ)`.
//
// # Safety
// All pointers must be valid.
enum LpStatus lp_bundle_dependence(const struct LpBundle *bundle, double *tau, double *kappa);

// Return level at one station for a period of `m` years with `n_x` days
// per year.
//
// # Safety
// `bundle` and `out` must be valid pointers.
enum LpStatus lp_bundle_return_level(const struct LpBundle *bundle,
                                     size_t site,
                                     double m,
                                     size_t n_x,
                                     enum LpMethod method,
                                     double *out);

// Simulates `n_fields` fields from the bundle's dependence model on the
// latent scale, written row-major into `buf` (`n_fields × n_sites`).
//
// # Safety
// `buf` must have room for `len` doubles.
enum LpStatus lp_bundle_simulate(const struct LpBundle *bundle,
                                 size_t n_fields,
                                 uint64_t seed,
                                 double *buf,
                                 size_t len);

// Stationary return level `u + (σ/γ)[(n_x m φ_u)^γ − 1]`.
//
// # Safety
// `out` must be a valid pointer.
enum LpStatus lp_stationary_return_level(double u,
                                         double sigma,
                                         double gamma,
                                         double phi_u,
                                         double m,
                                         size_t n_x,
                                         double *out);

// Removes the trend factor `c` from an observation.
//
// # Safety
// `out` must be a valid pointer.
enum LpStatus lp_latent_value(double x,
                              double c,
                              double gamma,
                              double a_tilde,
                              double b_tilde,
                              double *out);

// Inverse of [`lp_latent_value`].
//
// # Safety
// `out` must be a valid pointer.
enum LpStatus lp_observed_value(double z,
                                double c,
                                double gamma,
                                double a_tilde,
                                double b_tilde,
                                double *out);

// Runs the full pipeline described by a TOML config file.
//
// # Safety
// `config_path` must be a NUL-terminated string.
enum LpStatus lp_run_pipeline(const char *config_path);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LPARETO_H */
