#include <doctest.h>

#include <filesystem>

#include "core/csv.hpp"
#include "core/errors.hpp"
#include "core/pipeline.hpp"

using namespace mf;
namespace fs = std::filesystem;

namespace {

KeyValueConfig tiny_config(const std::string& out) {
    KeyValueConfig kv;
    kv.set("out", out);
    kv.set("seed", "11");
    kv.set("synth.n_cases", "36");
    kv.set("split.train", "0.5");
    kv.set("split.validation", "0.25");
    kv.set("split.test", "0.25");
    kv.set("train.density_view.epochs", "2");
    kv.set("train.density_view.swa_start", "1");
    kv.set("train.density_patient.epochs", "2");
    kv.set("train.patch.epochs", "2");
    kv.set("train.patch.finetune_epochs", "0");
    kv.set("train.findings.epochs", "2");
    kv.set("train.findings.finetune_epochs", "0");
    kv.set("train.localizer.epochs", "20");
    kv.set("train.feature_fusion.epochs", "4");
    kv.set("fusion.n_grid", "1");
    return kv;
}

struct OutDir {
    fs::path path;
    explicit OutDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
    }
    ~OutDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("config defaults, echo and profile derivation") {
    PipelineConfig cfg = PipelineConfig::defaults();
    CHECK(cfg.density_profile.target_height == 44);
    CHECK(cfg.density_profile.target_width == 28);
    CHECK(cfg.findings_profile.target_height == 144);
    CHECK(cfg.findings_profile.target_width == 112);
    CHECK(cfg.localization_profile.target_height == 336);
    CHECK(cfg.localization_profile.target_width == 152);
    CHECK(cfg.patch_size == 28);

    // the echoed config reproduces the same effective configuration
    PipelineConfig again = PipelineConfig::from_config(cfg.merged);
    CHECK(again.merged.serialize() == cfg.merged.serialize());

    PipelineConfig paper = PipelineConfig::defaults();
    paper.apply_paper_scale();
    CHECK(paper.backbone.feature_width == 1024);
    CHECK(paper.density_profile.target_height == 336);
    CHECK(paper.findings_profile.target_height == 1152);
    CHECK(paper.localization_profile.target_height == 2700);
    CHECK(paper.localizer_cfg.epochs == 100000);
    CHECK(paper.localizer_cfg.learning_rate == doctest::Approx(1e-4));
    CHECK(paper.patch_size == 224);

    KeyValueConfig bad;
    bad.set("split.train", "0.9");  // ratios no longer sum to 1
    PipelineConfig parsed = PipelineConfig::from_config(bad);
    CHECK_THROWS_AS(cmd_split(parsed), ConfigError);
}

TEST_CASE("generate refuses a dirty data directory and honours force") {
    OutDir dir("mf_pipe_force");
    KeyValueConfig kv = tiny_config(dir.path.string());
    kv.set("synth.n_cases", "3");
    PipelineConfig cfg = PipelineConfig::from_config(kv);
    cmd_generate(cfg);
    CHECK(fs::exists(dir.path / "data/manifest.csv"));
    CHECK_THROWS_WITH(cmd_generate(cfg), doctest::Contains("not empty"));
    kv.set("force", "true");
    PipelineConfig forced = PipelineConfig::from_config(kv);
    CHECK_NOTHROW(cmd_generate(forced));
}

TEST_CASE("generate is byte-identical across reruns with one seed") {
    OutDir dir_a("mf_pipe_idem_a");
    OutDir dir_b("mf_pipe_idem_b");
    KeyValueConfig kv = tiny_config(dir_a.path.string());
    kv.set("synth.n_cases", "4");
    cmd_generate(PipelineConfig::from_config(kv));
    kv.set("out", dir_b.path.string());
    cmd_generate(PipelineConfig::from_config(kv));
    // manifests differ only in the embedded absolute paths; compare images
    auto bytes = [](const fs::path& p) { return read_text_file(p.string()); };
    for (const auto& entry : fs::directory_iterator(dir_a.path / "data/images")) {
        fs::path other = dir_b.path / "data/images" / entry.path().filename();
        REQUIRE(fs::exists(other));
        CHECK(bytes(entry.path()) == bytes(other));
    }
    CHECK(bytes(dir_a.path / "data/synth_spec_echo.txt") == bytes(dir_b.path / "data/synth_spec_echo.txt"));
}

TEST_CASE("stage ordering errors carry the missing artifact") {
    OutDir dir("mf_pipe_order");
    PipelineConfig cfg = PipelineConfig::from_config(tiny_config(dir.path.string()));
    CHECK_THROWS_AS(cmd_split(cfg), MissingArtifactError);
    cmd_generate(cfg);
    CHECK_THROWS_AS(cmd_train(cfg, "density"), MissingArtifactError);
    cmd_split(cfg);
    // fusion before the task models names the first missing checkpoint
    CHECK_THROWS_WITH(cmd_train(cfg, "fusion"), doctest::Contains("missing checkpoint: localizer"));
    CHECK_THROWS_AS(cmd_extract(cfg), MissingArtifactError);
    CHECK_THROWS_AS(cmd_evaluate(cfg), MissingArtifactError);
    CHECK_THROWS_WITH(cmd_train(cfg, "bogus"), doctest::Contains("unknown training stage"));
}

TEST_CASE("tiny pipeline end to end with artifact checks") {
    OutDir dir("mf_pipe_e2e");
    PipelineConfig cfg = PipelineConfig::from_config(tiny_config(dir.path.string()));

    cmd_generate(cfg);
    cmd_split(cfg);

    // split csv covers all cases exactly once
    auto rows = read_csv((dir.path / "split/split.csv").string());
    CHECK(rows.size() == 37u);  // header + 36 cases

    cmd_train(cfg, "density");
    CHECK(fs::exists(dir.path / "checkpoints/density_view.mfc"));
    CHECK(fs::exists(dir.path / "checkpoints/density_patient.mfc"));
    CHECK(fs::exists(dir.path / "logs/density_view.csv"));

    cmd_train(cfg, "findings");
    CHECK(fs::exists(dir.path / "checkpoints/patch.mfc"));
    CHECK(fs::exists(dir.path / "checkpoints/findings.mfc"));
    CHECK(fs::exists(dir.path / "checkpoints/findings_nopre.mfc"));

    cmd_train(cfg, "localizer");
    CHECK(fs::exists(dir.path / "checkpoints/localizer.mfc"));

    cmd_extract(cfg);
    CHECK(fs::exists(dir.path / "cache/fusion_cache.bin"));

    // cache round trip: save -> load -> save is byte stable
    FusionCache cache = FusionCache::load((dir.path / "cache/fusion_cache.bin").string());
    CHECK(cache.cases.size() == 36u);
    CHECK(cache.has_nopre);
    std::string copy_path = (dir.path / "cache/copy.bin").string();
    cache.save(copy_path);
    FusionCache reload = FusionCache::load(copy_path);
    std::string copy2_path = (dir.path / "cache/copy2.bin").string();
    reload.save(copy2_path);
    CHECK(read_text_file(copy_path) == read_text_file(copy2_path));

    // every record carries the full feature contract
    for (const CaseRecord& c : cache.cases) {
        CHECK(c.density_feature.size() == 4u * cfg.backbone.feature_width);
        for (const auto& v : c.views) {
            CHECK(v.findings_feature.size() == static_cast<std::size_t>(cfg.backbone.feature_width));
            CHECK(v.background_feature.size() == static_cast<std::size_t>(cfg.backbone.feature_width));
            for (const auto& d : v.detections) {
                CHECK(d.feature.size() == static_cast<std::size_t>(cfg.backbone.feature_width));
            }
        }
    }

    cmd_train(cfg, "fusion");
    CHECK(fs::exists(dir.path / "fusion/score_mlp_lesion.mfc"));
    CHECK(fs::exists(dir.path / "fusion/score_svm_rbf_malignancy.mfc"));
    CHECK(fs::exists(dir.path / "fusion/feat_lesion_nodensity.mfc"));
    CHECK(fs::exists(dir.path / "fusion/selection_log.csv"));

    cmd_evaluate(cfg);
    CHECK(fs::exists(dir.path / "eval/report.txt"));
    CHECK(fs::exists(dir.path / "eval/predictions_lesion.csv"));
    CHECK(fs::exists(dir.path / "eval/pvalues_malignancy.csv"));
    CHECK(fs::exists(dir.path / "eval/plots/roc_lesion.svg"));
    CHECK(fs::exists(dir.path / "eval/density_thresholds.csv"));

    std::string report = read_text_file((dir.path / "eval/report.txt").string());
    for (const char* needle :
         {"model=P_score target=lesion", "model=P_feat_star target=malignancy", "model=max_pF",
          "model=max_pL", "model=D target=density", "model=mean_Dv", "density_threshold",
          "auc=", "auprc=", "f1=", "tpr=", "tnr=", "acc=", "p_vs_"}) {
        CHECK_MESSAGE(report.find(needle) != std::string::npos, "missing: " << needle);
    }

    // cache record count equals case count; predictions cover the test split
    auto pred_rows = read_csv((dir.path / "eval/predictions_lesion.csv").string());
    int test_count = 0;
    for (const CaseRecord& c : cache.cases) test_count += (c.split == SplitName::test);
    CHECK(static_cast<int>(pred_rows.size()) == test_count + 1);

    // report re-render reproduces the same text from artifacts alone
    std::string before = read_text_file((dir.path / "eval/report.txt").string());
    cmd_report(cfg);
    CHECK(read_text_file((dir.path / "eval/report.txt").string()) == before);
}
