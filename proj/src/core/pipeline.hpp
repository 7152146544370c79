#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "core/config.hpp"
#include "core/dataset.hpp"
#include "core/evalkit.hpp"
#include "core/fusion.hpp"
#include "core/nn.hpp"
#include "core/preprocess.hpp"
#include "core/synthgen.hpp"
#include "core/taskmodels.hpp"

namespace mf {

// Full experiment configuration with desk-scale defaults. Any key present in
// the source KeyValueConfig overrides its default; the merged set is echoed
// to <out>/config_echo.txt so an experiment can be re-run from that file.
struct PipelineConfig {
    KeyValueConfig merged;

    std::string out_dir;
    std::uint64_t seed = 7;
    bool force = false;

    bool synthetic = true;
    std::string manifest_path;  // external manifest when not synthetic
    SynthSpec synth;

    SplitRatios ratios;
    std::vector<StrataKey> strata;

    double scale = 0.125;
    BackboneConfig backbone;  // template: profiles filled per model below
    PreprocessProfile density_profile, findings_profile, localization_profile;
    int patch_size = 28;
    int patches_per_lesion = 5;
    int patches_per_normal = 5;

    nn::TrainConfig density_view_cfg, density_patient_cfg, patch_cfg, findings_cfg, localizer_cfg,
        feature_fusion_cfg;
    bool findings_pretrain_ablation = true;
    double box_jitter_ratio = 0.005;
    LocalizerConfig localizer_model;

    std::vector<int> fusion_n_grid = {1, 2, 3, 4, 5};
    bool fusion_density_ablation = true;
    EmbeddingNetConfig embedding;

    std::vector<double> density_thresholds = {0.5, 0.6, 0.7, 0.8};

    static PipelineConfig from_config(const KeyValueConfig& kv);
    static PipelineConfig defaults() { return from_config(KeyValueConfig()); }

    // Applies the full-scale preset (published dimensions and schedules).
    void apply_paper_scale();

    std::uint64_t stage_seed(const char* stage) const;
};

struct PipelinePaths {
    std::string out;

    std::string config_echo() const { return out + "/config_echo.txt"; }
    std::string lock() const { return out + "/.lock"; }
    std::string data_dir() const { return out + "/data"; }
    std::string manifest() const { return out + "/data/manifest.csv"; }
    std::string split_dir() const { return out + "/split"; }
    std::string split_csv() const { return out + "/split/split.csv"; }
    std::string split_warnings() const { return out + "/split/split_warnings.csv"; }
    std::string load_report() const { return out + "/split/load_report.csv"; }
    std::string checkpoints_dir() const { return out + "/checkpoints"; }
    std::string checkpoint(const std::string& name) const {
        return out + "/checkpoints/" + name + ".mfc";
    }
    std::string log_dir() const { return out + "/logs"; }
    std::string train_log(const std::string& stage) const { return out + "/logs/" + stage + ".csv"; }
    std::string cache_dir() const { return out + "/cache"; }
    std::string fusion_cache() const { return out + "/cache/fusion_cache.bin"; }
    std::string fusion_dir() const { return out + "/fusion"; }
    std::string fusion_head(const std::string& name) const { return out + "/fusion/" + name + ".mfc"; }
    std::string fusion_selection_log() const { return out + "/fusion/selection_log.csv"; }
    std::string eval_dir() const { return out + "/eval"; }
    std::string report() const { return out + "/eval/report.txt"; }
};

// ---------------------------------------------------------------------------
// Fusion input cache: per-case task-model outputs, so fusion heads can be
// retrained without re-running the task models.

struct ViewRecord {
    double p_findings = 0.0;
    double p_findings_nopre = 0.0;
    double p_density_view = 0.0;
    int has_lesion = 0;
    std::vector<double> findings_feature;
    std::vector<double> background_feature;
    std::vector<Detection> detections;          // original-image coordinates
    std::vector<GroundTruthBox> ground_truths;  // original-image coordinates
};

struct CaseRecord {
    std::string case_id;
    SplitName split = SplitName::train;
    CaseLabels labels;
    double p_density = 0.0;
    std::vector<double> density_feature;
    std::array<ViewRecord, kNumViews> views;

    FusionInputs fusion_inputs() const;
};

struct FusionCache {
    int feature_width = 0;
    bool has_nopre = false;
    std::string layout_note;
    std::vector<CaseRecord> cases;

    void save(const std::string& path) const;
    static FusionCache load(const std::string& path);

    std::vector<const CaseRecord*> of_split(SplitName s) const;
};

// ---------------------------------------------------------------------------
// Stage commands (shared by the C API and tests). Each throws ConfigError /
// MissingArtifactError / DataError on the corresponding failure class.

void cmd_generate(const PipelineConfig& cfg);
void cmd_split(const PipelineConfig& cfg);
void cmd_train(const PipelineConfig& cfg, const std::string& stage);
void cmd_extract(const PipelineConfig& cfg);
void cmd_evaluate(const PipelineConfig& cfg);
void cmd_report(const PipelineConfig& cfg);

// Convenience: run a named stage ("generate", "split", "train:density", ...,
// "extract", "evaluate", "report").
void run_stage(const PipelineConfig& cfg, const std::string& stage);

}  // namespace mf
