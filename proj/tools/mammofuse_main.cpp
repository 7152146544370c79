// Command-line front end for the mammofuse pipeline. Talks to the shared
// library exclusively through the C API.

#include <cstdio>
#include <memory>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "mammofuse/mammofuse.h"

namespace {

struct PipelineDeleter {
    void operator()(mf_pipeline* p) const { mf_pipeline_destroy(p); }
};
using PipelineHandle = std::unique_ptr<mf_pipeline, PipelineDeleter>;

struct CommonOptions {
    std::string config_path;
    std::string out_dir;
    long long seed = -1;
    double scale = -1.0;
    bool force = false;
    bool paper_scale = false;
};

void add_common_options(CLI::App* cmd, CommonOptions& opts) {
    cmd->add_option("--config", opts.config_path, "configuration file (key = value lines)")
        ->check(CLI::ExistingFile);
    cmd->add_option("--out", opts.out_dir, "output directory for all artifacts");
    cmd->add_option("--seed", opts.seed, "global random seed");
    cmd->add_option("--scale", opts.scale, "input-resolution scale factor in (0, 1]");
    cmd->add_flag("--force", opts.force, "overwrite outputs / ignore a stale lock");
    cmd->add_flag("--paper-scale", opts.paper_scale,
                  "use the full-scale preset (published input sizes and schedules)");
}

int run_stage(const CommonOptions& opts, const std::string& stage) {
    mf_pipeline* raw = nullptr;
    mf_status status = mf_pipeline_create(opts.config_path.c_str(), &raw);
    if (status != MF_OK) {
        std::fprintf(stderr, "error: cannot load config '%s'\n", opts.config_path.c_str());
        return status;
    }
    PipelineHandle pipeline(raw);

    auto set = [&](const char* key, const std::string& value) {
        mf_status s = mf_pipeline_set(pipeline.get(), key, value.c_str());
        if (s != MF_OK) {
            std::fprintf(stderr, "error: %s\n", mf_pipeline_last_error(pipeline.get()));
        }
        return s;
    };
    if (!opts.out_dir.empty() && set("out", opts.out_dir) != MF_OK) return MF_ERROR_CONFIG;
    if (opts.seed >= 0 && set("seed", std::to_string(opts.seed)) != MF_OK) return MF_ERROR_CONFIG;
    if (opts.scale > 0 && set("model.scale", std::to_string(opts.scale)) != MF_OK) return MF_ERROR_CONFIG;
    if (opts.force && set("force", "true") != MF_OK) return MF_ERROR_CONFIG;
    if (opts.paper_scale) {
        mf_status s = mf_pipeline_use_paper_scale(pipeline.get());
        if (s != MF_OK) {
            std::fprintf(stderr, "error: %s\n", mf_pipeline_last_error(pipeline.get()));
            return s;
        }
    }

    status = mf_pipeline_run(pipeline.get(), stage.c_str());
    if (status != MF_OK) {
        std::fprintf(stderr, "error: %s\n", mf_pipeline_last_error(pipeline.get()));
        return status;
    }
    std::printf("%s: done\n", stage.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"mammofuse: multi-task mammography pipeline"};
    app.require_subcommand(1);
    app.set_version_flag("--version", std::string(mf_version()));

    CommonOptions opts;
    std::string train_stage;

    CLI::App* generate = app.add_subcommand("generate", "render the synthetic dataset and manifest");
    CLI::App* split_cmd = app.add_subcommand("split", "stratified case-level train/validation/test split");
    CLI::App* train = app.add_subcommand("train", "train one stage");
    train->add_option("stage", train_stage, "density | findings | localizer | fusion")->required();
    CLI::App* extract = app.add_subcommand("extract", "cache task-model outputs per case");
    CLI::App* evaluate = app.add_subcommand("evaluate", "compute metrics, curves and the report");
    CLI::App* report = app.add_subcommand("report", "re-render the report from evaluation artifacts");

    for (CLI::App* cmd : {generate, split_cmd, train, extract, evaluate, report}) {
        add_common_options(cmd, opts);
    }

    CLI11_PARSE(app, argc, argv);

    if (generate->parsed()) return run_stage(opts, "generate");
    if (split_cmd->parsed()) return run_stage(opts, "split");
    if (train->parsed()) return run_stage(opts, "train:" + train_stage);
    if (extract->parsed()) return run_stage(opts, "extract");
    if (evaluate->parsed()) return run_stage(opts, "evaluate");
    if (report->parsed()) return run_stage(opts, "report");
    return 0;
}
