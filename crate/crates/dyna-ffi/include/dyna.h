/* C ABI for the day-night adaptation pipeline. */

#ifndef DYNA_H
#define DYNA_H

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status codes mirrored by the CLI's exit codes.
 */
typedef enum {
  DYNA_STATUS_OK = 0,
  DYNA_STATUS_USAGE_ERROR = 1,
  DYNA_STATUS_DATA_ERROR = 2,
  DYNA_STATUS_INVARIANT_ERROR = 3,
  DYNA_STATUS_NULL_ARGUMENT = 4,
} DynaStatus;

/**
 * Opaque model handle.
 */
typedef struct DynaModel DynaModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string; do not free.
 */
const char *dyna_version(void);

/**
 * Message for the most recent failure on this thread; valid until the
 * next library call on the same thread. Do not free.
 */
const char *dyna_last_error(void);

/**
 * Free a string returned through an out-parameter.
 *
 * # Safety
 * `s` must be a pointer previously returned by this library (or null).
 */
void dyna_string_free(char *s);

/**
 * Free a model handle.
 *
 * # Safety
 * `model` must be a pointer previously returned by this library (or null),
 * not yet freed.
 */
void dyna_model_free(DynaModel *model);

/**
 * Fresh randomly-initialized model (`in_ch`/`out_ch` channels).
 *
 * # Safety
 * `out` must be a valid pointer to a model-handle slot.
 */
DynaStatus dyna_model_init(uint32_t in_ch, uint32_t out_ch, uint64_t seed, DynaModel **out);

/**
 * Load a model checkpoint.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` a valid slot.
 */
DynaStatus dyna_model_load(const char *path, DynaModel **out);

/**
 * Save a model checkpoint.
 *
 * # Safety
 * `model` must be a live handle; `path` a NUL-terminated string.
 */
DynaStatus dyna_model_save(const DynaModel *model, const char *path);

/**
 * Train a source model on the synthetic source domain.
 *
 * # Safety
 * `out` must be a valid slot.
 */
DynaStatus dyna_train_source(uint64_t seed, uint32_t epochs, double lr, DynaModel **out);

/**
 * Mean offline Dice of a model over a synthetic target domain
 * (`target` is 'A' or 'B').
 *
 * # Safety
 * `model` must be a live handle; `out_dice` a valid f64 slot.
 */
DynaStatus dyna_eval(const DynaModel *model, char target, uint64_t seed, double *out_dice);

/**
 * Run a full day-night deployment from a JSON configuration (the same
 * schema as the CLI's `--config` file; `ckpt` and `out_dir` must be set).
 * On success `out_summary_json` receives the report summary; free it with
 * [`dyna_string_free`].
 *
 * # Safety
 * `config_json` must be a NUL-terminated string; `out_summary_json` may
 * be null when the caller only wants the files on disk.
 */
DynaStatus dyna_deploy(const char *config_json, char **out_summary_json);

/**
 * Convenience for bindings: which target domains exist.
 */
bool dyna_target_is_valid(char target);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYNA_H */
