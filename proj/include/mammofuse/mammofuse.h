/* mammofuse C API: multi-task mammography pipeline behind opaque handles.
 *
 * A pipeline handle wraps one experiment configuration. Stages write their
 * artifacts under the configured output directory and later stages read them
 * back, so a full run is:
 *
 *   generate -> split -> train:density -> train:findings -> train:localizer
 *            -> extract -> train:fusion -> evaluate [-> report]
 *
 * All functions return mf_status; mf_pipeline_last_error() describes the most
 * recent failure on the handle. Handles are not thread-safe.
 */
#ifndef MAMMOFUSE_H
#define MAMMOFUSE_H

#include <stddef.h>

#if defined(_WIN32)
#define MF_API __declspec(dllexport)
#else
#define MF_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef struct mf_pipeline mf_pipeline;

typedef enum mf_status {
    MF_OK = 0,
    MF_ERROR_CONFIG = 2,   /* invalid configuration or arguments */
    MF_ERROR_MISSING = 3,  /* a required upstream artifact does not exist */
    MF_ERROR_DATA = 4,     /* malformed data, I/O failure, integrity error */
    MF_ERROR_INTERNAL = 5
} mf_status;

MF_API const char* mf_version(void);

/* Creates a pipeline from a config file (NULL or "" = built-in defaults). */
MF_API mf_status mf_pipeline_create(const char* config_path, mf_pipeline** out);

/* Overrides one config key, e.g. mf_pipeline_set(p, "seed", "7"). */
MF_API mf_status mf_pipeline_set(mf_pipeline* p, const char* key, const char* value);

/* Applies the full-scale preset (published input sizes and schedules). */
MF_API mf_status mf_pipeline_use_paper_scale(mf_pipeline* p);

/* Runs one stage: "generate", "split", "train:density", "train:findings",
 * "train:localizer", "train:fusion", "extract", "evaluate" or "report". */
MF_API mf_status mf_pipeline_run(mf_pipeline* p, const char* stage);

/* Copies the effective value of a config key into buf (NUL-terminated,
 * truncating); returns MF_ERROR_CONFIG for unknown keys. */
MF_API mf_status mf_pipeline_get(const mf_pipeline* p, const char* key, char* buf, size_t buf_size);

/* Message for the most recent error on this handle ("" if none). */
MF_API const char* mf_pipeline_last_error(const mf_pipeline* p);

MF_API void mf_pipeline_destroy(mf_pipeline* p);

#ifdef __cplusplus
}
#endif

#endif /* MAMMOFUSE_H */
