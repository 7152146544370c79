// Exercises the shared-library surface end to end: handle lifecycle, config
// overrides, error codes and a miniature pipeline run.

#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <string>

#include "mammofuse/mammofuse.h"

namespace fs = std::filesystem;

namespace {

struct Handle {
    mf_pipeline* p = nullptr;
    ~Handle() { mf_pipeline_destroy(p); }
};

}  // namespace

TEST_CASE("version and handle lifecycle") {
    CHECK(std::string(mf_version()).find('.') != std::string::npos);

    Handle h;
    CHECK(mf_pipeline_create(nullptr, &h.p) == MF_OK);
    REQUIRE(h.p != nullptr);
    CHECK(std::string(mf_pipeline_last_error(h.p)).empty());

    char buf[64];
    CHECK(mf_pipeline_get(h.p, "seed", buf, sizeof(buf)) == MF_OK);
    CHECK(std::string(buf) == "7");
    CHECK(mf_pipeline_get(h.p, "no.such.key", buf, sizeof(buf)) == MF_ERROR_CONFIG);

    CHECK(mf_pipeline_set(h.p, "seed", "123") == MF_OK);
    CHECK(mf_pipeline_get(h.p, "seed", buf, sizeof(buf)) == MF_OK);
    CHECK(std::string(buf) == "123");

    // invalid values are rejected and do not stick
    CHECK(mf_pipeline_set(h.p, "model.scale", "2.5") == MF_ERROR_CONFIG);
    CHECK(std::string(mf_pipeline_last_error(h.p)).find("scale") != std::string::npos);
    CHECK(mf_pipeline_get(h.p, "model.scale", buf, sizeof(buf)) == MF_OK);
    CHECK(std::string(buf) == "0.125");
}

TEST_CASE("missing config file and bad stage names") {
    mf_pipeline* p = nullptr;
    CHECK(mf_pipeline_create("/nonexistent/config.cfg", &p) == MF_ERROR_CONFIG);
    CHECK(p == nullptr);

    Handle h;
    REQUIRE(mf_pipeline_create(nullptr, &h.p) == MF_OK);
    CHECK(mf_pipeline_run(h.p, "no-such-stage") == MF_ERROR_CONFIG);
    CHECK(mf_pipeline_run(nullptr, "generate") == MF_ERROR_CONFIG);
}

TEST_CASE("paper-scale preset is visible through the config surface") {
    Handle h;
    REQUIRE(mf_pipeline_create(nullptr, &h.p) == MF_OK);
    CHECK(mf_pipeline_use_paper_scale(h.p) == MF_OK);
    char buf[64];
    CHECK(mf_pipeline_get(h.p, "model.feature_width", buf, sizeof(buf)) == MF_OK);
    CHECK(std::string(buf) == "1024");
    CHECK(mf_pipeline_get(h.p, "train.localizer.epochs", buf, sizeof(buf)) == MF_OK);
    CHECK(std::string(buf) == "100000");
}

TEST_CASE("miniature pipeline through the C API") {
    fs::path out = fs::temp_directory_path() / "mf_capi_e2e";
    fs::remove_all(out);

    Handle h;
    REQUIRE(mf_pipeline_create(nullptr, &h.p) == MF_OK);
    auto set = [&](const char* k, const std::string& v) {
        REQUIRE(mf_pipeline_set(h.p, k, v.c_str()) == MF_OK);
    };
    set("out", out.string());
    set("seed", "19");
    set("synth.n_cases", "36");
    set("split.train", "0.5");
    set("split.validation", "0.25");
    set("split.test", "0.25");
    set("train.density_view.epochs", "2");
    set("train.density_patient.epochs", "2");
    set("train.patch.epochs", "2");
    set("train.patch.finetune_epochs", "0");
    set("train.findings.epochs", "2");
    set("train.findings.finetune_epochs", "0");
    set("train.localizer.epochs", "15");
    set("train.feature_fusion.epochs", "3");
    set("fusion.n_grid", "1");

    // upstream artifacts are demanded in order
    CHECK(mf_pipeline_run(h.p, "split") == MF_ERROR_MISSING);
    CHECK(std::string(mf_pipeline_last_error(h.p)).find("manifest") != std::string::npos);

    for (const char* stage : {"generate", "split", "train:density", "train:findings",
                              "train:localizer", "extract", "train:fusion", "evaluate", "report"}) {
        INFO("stage " << stage);
        CHECK(mf_pipeline_run(h.p, stage) == MF_OK);
    }
    CHECK(fs::exists(out / "eval/report.txt"));
    CHECK(fs::exists(out / "config_echo.txt"));

    // rerunning generate without force refuses to clobber the data directory
    CHECK(mf_pipeline_run(h.p, "generate") == MF_ERROR_DATA);
    set("force", "true");
    CHECK(mf_pipeline_run(h.p, "generate") == MF_OK);

    fs::remove_all(out);
}
