#ifndef CPS_H
#define CPS_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Evaluation mode selector.
typedef enum CpsEvalMode {
  CPS_EVAL_MODE_POPS = 0,
  CPS_EVAL_MODE_ORACLE = 1,
  CPS_EVAL_MODE_FT_SEQ = 2,
} CpsEvalMode;

// Outcome of a call.
typedef enum CpsStatus {
  CPS_STATUS_OK = 0,
  CPS_STATUS_NULL_ARGUMENT = 1,
  CPS_STATUS_INVALID_UTF8 = 2,
  CPS_STATUS_INVALID_ARGUMENT = 3,
  CPS_STATUS_CONFIG = 4,
  CPS_STATUS_IO = 5,
  CPS_STATUS_CHECKPOINT = 6,
  CPS_STATUS_PROTOCOL = 7,
  CPS_STATUS_COMPUTE = 8,
  CPS_STATUS_PANIC = 9,
} CpsStatus;

// Pretrained or trained model state with its prompt snapshots.
typedef struct CpsCheckpoint CpsCheckpoint;

// Run configuration.
typedef struct CpsConfig CpsConfig;

// Evaluation report.
typedef struct CpsReport CpsReport;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. The pointer stays
// valid until the next call on the same thread.
const char *cps_last_error(void);

// Static version string of the library.
const char *cps_version(void);

// Releases a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void cps_string_free(char *s);

// Default run configuration.
//
// # Safety
// `out` must be a valid pointer to writable storage.
enum CpsStatus cps_config_default(struct CpsConfig **out);

// Parses and validates a JSON configuration; unknown keys are rejected.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum CpsStatus cps_config_from_json(const char *json, struct CpsConfig **out);

// Serialises a configuration; free the result with `cps_string_free`.
//
// # Safety
// `config` must be a live handle; `out` must be writable.
enum CpsStatus cps_config_to_json(const struct CpsConfig *config, char **out);

// Hex SHA-256 of the canonical configuration.
//
// # Safety
// `config` must be a live handle; `out` must be writable.
enum CpsStatus cps_config_hash(const struct CpsConfig *config, char **out);

// Number of domains in the configured order.
//
// # Safety
// `config` must be a live handle; `out` must be writable.
enum CpsStatus cps_config_domain_count(const struct CpsConfig *config, size_t *out);

// # Safety
// `config` must come from this library and not be freed twice. Null is ignored.
void cps_config_free(struct CpsConfig *config);

// Warm-up and detector pretraining; yields a checkpoint with no domains.
//
// # Safety
// `config` must be a live handle; `out` must be writable.
enum CpsStatus cps_pretrain(const struct CpsConfig *config, struct CpsCheckpoint **out);

// Learns every configured domain in order from a pretrained checkpoint.
//
// # Safety
// Both handles must be live; `out` must be writable.
enum CpsStatus cps_train(const struct CpsConfig *config,
                         const struct CpsCheckpoint *pretrained,
                         struct CpsCheckpoint **out);

// Evaluates all training stages of a checkpoint on its configured domains.
//
// # Safety
// `ckpt` must be a live handle; `out` must be writable.
enum CpsStatus cps_evaluate(const struct CpsCheckpoint *ckpt,
                            enum CpsEvalMode mode,
                            struct CpsReport **out);

// # Safety
// `path` must be a NUL-terminated string; `out` must be writable.
enum CpsStatus cps_checkpoint_load(const char *path, struct CpsCheckpoint **out);

// # Safety
// `ckpt` must be a live handle; `path` a NUL-terminated string.
enum CpsStatus cps_checkpoint_save(const struct CpsCheckpoint *ckpt, const char *path);

// Number of trained domains held by the checkpoint.
//
// # Safety
// `ckpt` must be a live handle; `out` must be writable.
enum CpsStatus cps_checkpoint_domain_count(const struct CpsCheckpoint *ckpt, size_t *out);

// The checkpoint manifest as JSON.
//
// # Safety
// `ckpt` must be a live handle; `out` must be writable.
enum CpsStatus cps_checkpoint_manifest(const struct CpsCheckpoint *ckpt, char **out);

// # Safety
// `ckpt` must come from this library and not be freed twice. Null is ignored.
void cps_checkpoint_free(struct CpsCheckpoint *ckpt);

// Parses a JSON report.
//
// # Safety
// `json` must be a NUL-terminated string; `out` must be writable.
enum CpsStatus cps_report_from_json(const char *json, struct CpsReport **out);

// Renders a report as `"json"` or `"csv"`.
//
// # Safety
// `report` must be a live handle, `format` a NUL-terminated string, `out` writable.
enum CpsStatus cps_report_render(const struct CpsReport *report, const char *format, char **out);

// Gallery-weighted average of the final search mAP, as a fraction.
//
// # Safety
// `report` must be a live handle; `out` must be writable.
enum CpsStatus cps_report_average_map(const struct CpsReport *report, double *out);

// # Safety
// `report` must come from this library and not be freed twice. Null is ignored.
void cps_report_free(struct CpsReport *report);

// `Σ wᵢ vᵢ / Σ wᵢ` over `n` values.
//
// # Safety
// `values` and `weights` must point to `n` readable doubles; `out` must be writable.
enum CpsStatus cps_weighted_average(const double *values,
                                    const double *weights,
                                    size_t n,
                                    double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPS_H */
