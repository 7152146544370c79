#include "mammofuse/mammofuse.h"

#include <cstring>
#include <functional>
#include <string>

#include "core/errors.hpp"
#include "core/pipeline.hpp"

struct mf_pipeline {
    mf::KeyValueConfig config;
    bool paper_scale = false;
    std::string last_error;
};

namespace {

mf_status capture(mf_pipeline* p, const std::function<void()>& fn) {
    try {
        fn();
        if (p) p->last_error.clear();
        return MF_OK;
    } catch (const mf::ConfigError& e) {
        if (p) p->last_error = e.what();
        return MF_ERROR_CONFIG;
    } catch (const mf::MissingArtifactError& e) {
        if (p) p->last_error = e.what();
        return MF_ERROR_MISSING;
    } catch (const mf::DataError& e) {
        if (p) p->last_error = e.what();
        return MF_ERROR_DATA;
    } catch (const std::exception& e) {
        if (p) p->last_error = e.what();
        return MF_ERROR_INTERNAL;
    }
}

mf::PipelineConfig effective_config(const mf_pipeline* p) {
    mf::PipelineConfig cfg = mf::PipelineConfig::from_config(p->config);
    if (p->paper_scale) cfg.apply_paper_scale();
    return cfg;
}

}  // namespace

extern "C" {

const char* mf_version(void) { return "1.0.0"; }

mf_status mf_pipeline_create(const char* config_path, mf_pipeline** out) {
    if (!out) return MF_ERROR_CONFIG;
    *out = nullptr;
    auto* p = new mf_pipeline();
    mf_status status = capture(p, [&] {
        if (config_path && config_path[0] != '\0') {
            p->config = mf::KeyValueConfig::from_file(config_path);
        }
        mf::PipelineConfig::from_config(p->config);  // validate eagerly
    });
    if (status != MF_OK) {
        delete p;
        return status;
    }
    *out = p;
    return MF_OK;
}

mf_status mf_pipeline_set(mf_pipeline* p, const char* key, const char* value) {
    if (!p || !key || !value) return MF_ERROR_CONFIG;
    return capture(p, [&] {
        mf::KeyValueConfig trial = p->config;
        trial.set(key, value);
        mf::PipelineConfig::from_config(trial);  // reject invalid values now
        p->config = trial;
    });
}

mf_status mf_pipeline_use_paper_scale(mf_pipeline* p) {
    if (!p) return MF_ERROR_CONFIG;
    return capture(p, [&] {
        p->paper_scale = true;
        effective_config(p);
    });
}

mf_status mf_pipeline_run(mf_pipeline* p, const char* stage) {
    if (!p || !stage) return MF_ERROR_CONFIG;
    return capture(p, [&] { mf::run_stage(effective_config(p), stage); });
}

mf_status mf_pipeline_get(const mf_pipeline* p, const char* key, char* buf, size_t buf_size) {
    if (!p || !key || !buf || buf_size == 0) return MF_ERROR_CONFIG;
    mf_status status = MF_OK;
    try {
        mf::PipelineConfig cfg = effective_config(p);
        if (!cfg.merged.has(key)) return MF_ERROR_CONFIG;
        std::string value = cfg.merged.get_string(key, "");
        std::strncpy(buf, value.c_str(), buf_size - 1);
        buf[buf_size - 1] = '\0';
    } catch (const std::exception&) {
        status = MF_ERROR_CONFIG;
    }
    return status;
}

const char* mf_pipeline_last_error(const mf_pipeline* p) {
    return p ? p->last_error.c_str() : "";
}

void mf_pipeline_destroy(mf_pipeline* p) { delete p; }

}  // extern "C"
