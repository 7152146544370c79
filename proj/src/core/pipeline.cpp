#include "core/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <set>

#include "core/csv.hpp"
#include "core/errors.hpp"
#include "core/evalkit.hpp"
#include "core/image.hpp"
#include "core/strutil.hpp"
#include "core/svgplot.hpp"

namespace fs = std::filesystem;

namespace mf {

namespace {

// Published full-scale reference points; echoed into reports as context, not
// reproduced at desk scale.
struct FrocReference {
    LesionClass cls;
    double tpr;
    double fpi;
};
constexpr FrocReference kFullScaleFrocReferences[] = {
    {LesionClass::malignant_mass, 0.84, 1.0},
    {LesionClass::malignant_calcification, 0.93, 1.09},
    {LesionClass::benign_mass, 0.70, 1.06},
    {LesionClass::benign_calcification, 0.68, 1.06},
};

nn::TrainConfig parse_train_config(const KeyValueConfig& kv, const std::string& prefix,
                                   nn::TrainConfig def) {
    auto key = [&](const char* k) { return prefix + "." + k; };
    std::string opt = kv.get_string(key("optimizer"),
                                    def.optimizer == nn::OptimizerKind::adaptive_moment ? "adam" : "sgd");
    if (opt == "adam") def.optimizer = nn::OptimizerKind::adaptive_moment;
    else if (opt == "sgd") def.optimizer = nn::OptimizerKind::momentum_sgd;
    else throw ConfigError("unknown optimizer '" + opt + "' for " + prefix);
    def.learning_rate = kv.get_double(key("lr"), def.learning_rate);
    def.epochs = static_cast<int>(kv.get_int(key("epochs"), def.epochs));
    def.batch_size = static_cast<int>(kv.get_int(key("batch"), def.batch_size));
    def.swa_start_epoch = static_cast<int>(kv.get_int(key("swa_start"), def.swa_start_epoch));
    def.plateau_factor = kv.get_double(key("plateau_factor"), def.plateau_factor);
    def.plateau_patience = static_cast<int>(kv.get_int(key("plateau_patience"), def.plateau_patience));
    std::string monitor = kv.get_string(key("early_stop"),
                                        def.early_stop == nn::EarlyStopMonitor::none ? "none"
                                        : def.early_stop == nn::EarlyStopMonitor::validation_loss
                                            ? "loss"
                                            : "auc");
    if (monitor == "none") def.early_stop = nn::EarlyStopMonitor::none;
    else if (monitor == "loss") def.early_stop = nn::EarlyStopMonitor::validation_loss;
    else if (monitor == "auc") def.early_stop = nn::EarlyStopMonitor::validation_auc;
    else throw ConfigError("unknown early_stop monitor '" + monitor + "' for " + prefix);
    def.early_stop_patience = static_cast<int>(kv.get_int(key("early_patience"), def.early_stop_patience));
    def.early_stop_tolerance = kv.get_double(key("early_tolerance"), def.early_stop_tolerance);
    def.fine_tune_learning_rate = kv.get_double(key("finetune_lr"), def.fine_tune_learning_rate);
    def.fine_tune_epochs = static_cast<int>(kv.get_int(key("finetune_epochs"), def.fine_tune_epochs));
    def.stratified_batches = kv.get_bool(key("stratified"), def.stratified_batches);
    if (def.epochs <= 0 || def.batch_size <= 0) throw ConfigError(prefix + ": counts must be positive");
    if (def.early_stop_tolerance < 0) throw ConfigError(prefix + ": tolerance must be >= 0");
    return def;
}

void echo_train_config(KeyValueConfig& kv, const std::string& prefix, const nn::TrainConfig& cfg) {
    auto key = [&](const char* k) { return prefix + "." + k; };
    kv.set(key("optimizer"), cfg.optimizer == nn::OptimizerKind::adaptive_moment ? "adam" : "sgd");
    kv.set(key("lr"), format_double(cfg.learning_rate));
    kv.set(key("epochs"), std::to_string(cfg.epochs));
    kv.set(key("batch"), std::to_string(cfg.batch_size));
    kv.set(key("swa_start"), std::to_string(cfg.swa_start_epoch));
    kv.set(key("plateau_factor"), format_double(cfg.plateau_factor));
    kv.set(key("plateau_patience"), std::to_string(cfg.plateau_patience));
    kv.set(key("early_stop"), cfg.early_stop == nn::EarlyStopMonitor::none ? "none"
                              : cfg.early_stop == nn::EarlyStopMonitor::validation_loss ? "loss"
                                                                                        : "auc");
    kv.set(key("early_patience"), std::to_string(cfg.early_stop_patience));
    kv.set(key("early_tolerance"), format_double(cfg.early_stop_tolerance));
    kv.set(key("finetune_lr"), format_double(cfg.fine_tune_learning_rate));
    kv.set(key("finetune_epochs"), std::to_string(cfg.fine_tune_epochs));
    kv.set(key("stratified"), cfg.stratified_batches ? "true" : "false");
}

class DirectoryLock {
public:
    DirectoryLock(const std::string& path, bool force) : path_(path) {
        if (fs::exists(path_)) {
            if (!force) {
                throw DataError("output directory is locked by another command (" + path_ +
                                "); pass --force to override a stale lock");
            }
            fs::remove(path_);
        }
        write_text_file(path_, "locked\n");
    }
    ~DirectoryLock() {
        std::error_code ec;
        fs::remove(path_, ec);
    }

private:
    std::string path_;
};

std::string split_name(SplitName s) { return to_string(s); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

PipelineConfig PipelineConfig::from_config(const KeyValueConfig& kv) {
    PipelineConfig cfg;
    cfg.out_dir = kv.get_string("out", "out");
    cfg.seed = static_cast<std::uint64_t>(kv.get_int("seed", 7));
    cfg.force = kv.get_bool("force", false);

    std::string source = kv.get_string("data.source", "synthetic");
    if (source == "synthetic") cfg.synthetic = true;
    else if (source == "manifest") cfg.synthetic = false;
    else throw ConfigError("data.source must be 'synthetic' or 'manifest'");
    cfg.manifest_path = kv.get_string("data.manifest", "");
    if (!cfg.synthetic) {
        if (cfg.manifest_path.empty()) throw ConfigError("data.manifest is required for manifest source");
        if (!fs::exists(cfg.manifest_path)) {
            throw ConfigError("data.manifest does not exist: " + cfg.manifest_path);
        }
    }

    cfg.synth.seed = static_cast<std::uint64_t>(kv.get_int("synth.seed", static_cast<long long>(cfg.seed)));
    cfg.synth.n_cases = static_cast<int>(kv.get_int("synth.n_cases", 260));
    cfg.synth.image_height = static_cast<int>(kv.get_int("synth.image_height", 288));
    cfg.synth.image_width = static_cast<int>(kv.get_int("synth.image_width", 224));
    {
        auto probs = kv.get_doubles("synth.density_class_probs", {0.13, 0.38, 0.30, 0.19});
        if (probs.size() != 4) throw ConfigError("synth.density_class_probs needs 4 entries");
        std::copy(probs.begin(), probs.end(), cfg.synth.density_class_probs.begin());
        cfg.synth.lesion_count_distribution =
            kv.get_doubles("synth.lesion_count_probs", {0.35, 0.40, 0.25});
        cfg.synth.malignant_fraction = kv.get_double("synth.malignant_fraction", 0.5);
        cfg.synth.mass_fraction = kv.get_double("synth.mass_fraction", 0.55);
        auto mr = kv.get_doubles("synth.mass_radius", {10.0, 24.0});
        auto cr = kv.get_doubles("synth.calc_radius", {8.0, 16.0});
        if (mr.size() != 2 || cr.size() != 2) throw ConfigError("radius ranges need 2 entries");
        cfg.synth.mass_radius_range = {mr[0], mr[1]};
        cfg.synth.calc_radius_range = {cr[0], cr[1]};
        cfg.synth.texture_grain = kv.get_double("synth.texture_grain", 28.0);
        const char* names[4] = {"benign_calcification", "malignant_calcification", "benign_mass",
                                "malignant_mass"};
        for (int c = 0; c < 4; ++c) {
            auto base = cfg.synth.contrast_ranges[c];
            auto r = kv.get_doubles(std::string("synth.contrast.") + names[c], {base.first, base.second});
            if (r.size() != 2) throw ConfigError("contrast ranges need 2 entries");
            cfg.synth.contrast_ranges[c] = {r[0], r[1]};
        }
        cfg.synth.noise_sigma = kv.get_double("synth.noise_sigma", 0.006);
        cfg.synth.occlusion_probability = kv.get_double("synth.occlusion_probability", 0.15);
    }

    cfg.ratios.train = kv.get_double("split.train", 0.65);
    cfg.ratios.validation = kv.get_double("split.validation", 0.15);
    cfg.ratios.test = kv.get_double("split.test", 0.20);
    for (const std::string& s :
         split(kv.get_string("split.strata", "density,lesion_category,pathology_category"), ',')) {
        cfg.strata.push_back(parse_strata_key(trim(s)));
    }

    cfg.scale = kv.get_double("model.scale", 0.125);
    if (cfg.scale <= 0 || cfg.scale > 1) throw ConfigError("model.scale must lie in (0, 1]");
    cfg.backbone.feature_width = static_cast<int>(kv.get_int("model.feature_width", 64));
    if (cfg.backbone.feature_width < 8) throw ConfigError("model.feature_width must be >= 8");
    cfg.backbone.stem_channels = static_cast<int>(kv.get_int("model.stem_channels", 16));
    cfg.backbone.stage_channels.clear();
    for (long long c : kv.get_ints("model.stage_channels", {32, 64})) {
        cfg.backbone.stage_channels.push_back(static_cast<int>(c));
    }

    cfg.density_profile =
        PreprocessProfile::scaled(336, 224, IntensityMode::rescale_0_255, cfg.scale);
    cfg.findings_profile =
        PreprocessProfile::scaled(1152, 896, IntensityMode::rescale_0_1_zscore, cfg.scale);
    cfg.localization_profile =
        PreprocessProfile::scaled(2700, 1200, IntensityMode::rescale_0_1_zscore, cfg.scale);

    cfg.patch_size = static_cast<int>(
        kv.get_int("patch.size", 4 * std::max(1LL, std::llround(224.0 * cfg.scale / 4.0))));
    cfg.patches_per_lesion = static_cast<int>(kv.get_int("patch.per_lesion", 5));
    cfg.patches_per_normal = static_cast<int>(kv.get_int("patch.per_normal", 5));

    {
        nn::TrainConfig d;
        d.optimizer = nn::OptimizerKind::adaptive_moment;
        d.learning_rate = 1e-3;
        d.epochs = 25;
        d.batch_size = 16;
        d.swa_start_epoch = 10;
        d.plateau_factor = 0.2;
        d.plateau_patience = 5;
        cfg.density_view_cfg = parse_train_config(kv, "train.density_view", d);

        d = nn::TrainConfig();
        d.learning_rate = 1e-4;
        d.epochs = 25;
        d.batch_size = 4;
        d.swa_start_epoch = 5;
        d.plateau_factor = 0.2;
        d.plateau_patience = 5;
        cfg.density_patient_cfg = parse_train_config(kv, "train.density_patient", d);

        d = nn::TrainConfig();
        d.learning_rate = 1e-4;
        d.epochs = 40;
        d.batch_size = 64;
        d.early_stop = nn::EarlyStopMonitor::validation_loss;
        d.early_stop_patience = 10;
        d.early_stop_tolerance = 0.001;
        d.fine_tune_learning_rate = 1e-5;
        d.fine_tune_epochs = 5;
        cfg.patch_cfg = parse_train_config(kv, "train.patch", d);

        d = nn::TrainConfig();
        d.learning_rate = 1e-4;
        d.epochs = 20;
        d.batch_size = 6;
        d.early_stop = nn::EarlyStopMonitor::validation_auc;
        d.early_stop_patience = 10;
        d.early_stop_tolerance = 0.001;
        d.swa_start_epoch = 5;
        d.fine_tune_learning_rate = 1e-5;
        d.fine_tune_epochs = 3;
        d.stratified_batches = true;
        cfg.findings_cfg = parse_train_config(kv, "train.findings", d);

        d = nn::TrainConfig();
        d.optimizer = nn::OptimizerKind::momentum_sgd;
        d.learning_rate = 0.05;  // full-scale preset uses the published 1e-4
        d.epochs = 2000;         // iterations
        d.batch_size = 2;
        cfg.localizer_cfg = parse_train_config(kv, "train.localizer", d);

        d = nn::TrainConfig();
        d.learning_rate = 5e-4;
        d.epochs = 120;
        d.batch_size = 8;
        d.early_stop = nn::EarlyStopMonitor::validation_loss;
        d.early_stop_patience = 10;
        d.early_stop_tolerance = 0.001;
        d.stratified_batches = true;
        cfg.feature_fusion_cfg = parse_train_config(kv, "train.feature_fusion", d);
    }

    cfg.findings_pretrain_ablation = kv.get_bool("findings.pretrain_ablation", true);
    cfg.box_jitter_ratio = kv.get_double("localizer.box_jitter", 0.005);

    cfg.localizer_model.backbone = cfg.backbone;
    cfg.localizer_model.backbone.input_profile = cfg.localization_profile;
    cfg.localizer_model.anchors.scales.clear();
    for (double s : kv.get_doubles("localizer.anchor_scales", {12.0, 24.0, 48.0})) {
        cfg.localizer_model.anchors.scales.push_back(s);
    }
    cfg.localizer_model.anchors.aspect_ratios.clear();
    for (double a : kv.get_doubles("localizer.aspect_ratios", {1.0, 1.6})) {
        cfg.localizer_model.anchors.aspect_ratios.push_back(a);
    }
    cfg.localizer_model.score_threshold = kv.get_double("localizer.score_threshold", 0.05);
    cfg.localizer_model.nms_iou = kv.get_double("localizer.nms_iou", 0.5);
    cfg.localizer_model.max_detections = static_cast<int>(kv.get_int("localizer.max_detections", 16));

    cfg.fusion_n_grid.clear();
    for (long long n : kv.get_ints("fusion.n_grid", {1, 2, 3, 4, 5})) {
        cfg.fusion_n_grid.push_back(static_cast<int>(n));
    }
    cfg.fusion_density_ablation = kv.get_bool("fusion.density_ablation", true);
    cfg.embedding.feature_width = cfg.backbone.feature_width;
    cfg.embedding.branch_channels = static_cast<int>(kv.get_int("fusion.branch_channels", 16));
    cfg.embedding.head_hidden = static_cast<int>(kv.get_int("fusion.head_hidden", 64));
    cfg.embedding.head_dropout = kv.get_double("fusion.head_dropout", 0.1);

    cfg.density_thresholds = kv.get_doubles("eval.density_thresholds", {0.5, 0.6, 0.7, 0.8});

    // Merged echo: every effective key, whether defaulted or overridden.
    KeyValueConfig echo = kv;
    echo.set("out", cfg.out_dir);
    echo.set("seed", std::to_string(cfg.seed));
    echo.set("data.source", cfg.synthetic ? "synthetic" : "manifest");
    if (!cfg.manifest_path.empty()) echo.set("data.manifest", cfg.manifest_path);
    KeyValueConfig synth_echo = KeyValueConfig::from_string(spec_echo(cfg.synth));
    for (const auto& [k, v] : synth_echo.entries()) {
        echo.set("synth." + k, v);
    }
    echo.set("split.train", format_double(cfg.ratios.train));
    echo.set("split.validation", format_double(cfg.ratios.validation));
    echo.set("split.test", format_double(cfg.ratios.test));
    echo.set("split.strata", kv.get_string("split.strata", "density,lesion_category,pathology_category"));
    echo.set("model.scale", format_double(cfg.scale));
    echo.set("model.feature_width", std::to_string(cfg.backbone.feature_width));
    echo.set("model.stem_channels", std::to_string(cfg.backbone.stem_channels));
    {
        std::string stages;
        for (int c : cfg.backbone.stage_channels) stages += (stages.empty() ? "" : ",") + std::to_string(c);
        echo.set("model.stage_channels", stages);
    }
    echo.set("patch.size", std::to_string(cfg.patch_size));
    echo.set("patch.per_lesion", std::to_string(cfg.patches_per_lesion));
    echo.set("patch.per_normal", std::to_string(cfg.patches_per_normal));
    echo_train_config(echo, "train.density_view", cfg.density_view_cfg);
    echo_train_config(echo, "train.density_patient", cfg.density_patient_cfg);
    echo_train_config(echo, "train.patch", cfg.patch_cfg);
    echo_train_config(echo, "train.findings", cfg.findings_cfg);
    echo_train_config(echo, "train.localizer", cfg.localizer_cfg);
    echo_train_config(echo, "train.feature_fusion", cfg.feature_fusion_cfg);
    echo.set("findings.pretrain_ablation", cfg.findings_pretrain_ablation ? "true" : "false");
    echo.set("localizer.box_jitter", format_double(cfg.box_jitter_ratio));
    {
        std::string scales, aspects, grid;
        for (double s : cfg.localizer_model.anchors.scales) scales += (scales.empty() ? "" : ",") + format_double(s);
        for (double a : cfg.localizer_model.anchors.aspect_ratios) aspects += (aspects.empty() ? "" : ",") + format_double(a);
        for (int n : cfg.fusion_n_grid) grid += (grid.empty() ? "" : ",") + std::to_string(n);
        echo.set("localizer.anchor_scales", scales);
        echo.set("localizer.aspect_ratios", aspects);
        echo.set("fusion.n_grid", grid);
    }
    echo.set("localizer.score_threshold", format_double(cfg.localizer_model.score_threshold));
    echo.set("localizer.nms_iou", format_double(cfg.localizer_model.nms_iou));
    echo.set("localizer.max_detections", std::to_string(cfg.localizer_model.max_detections));
    echo.set("fusion.density_ablation", cfg.fusion_density_ablation ? "true" : "false");
    echo.set("fusion.branch_channels", std::to_string(cfg.embedding.branch_channels));
    echo.set("fusion.head_hidden", std::to_string(cfg.embedding.head_hidden));
    echo.set("fusion.head_dropout", format_double(cfg.embedding.head_dropout));
    {
        std::string ths;
        for (double t : cfg.density_thresholds) ths += (ths.empty() ? "" : ",") + format_double(t);
        echo.set("eval.density_thresholds", ths);
    }
    cfg.merged = echo;
    return cfg;
}

void PipelineConfig::apply_paper_scale() {
    KeyValueConfig kv = merged;
    kv.set("model.scale", "1.0");
    kv.set("model.feature_width", "1024");
    kv.set("model.stem_channels", "32");
    kv.set("model.stage_channels", "64,128,256,512,1024");
    kv.set("train.localizer.epochs", "100000");
    kv.set("train.localizer.lr", "0.0001");
    kv.set("train.findings.epochs", "60");
    kv.set("train.findings.early_patience", "10");
    kv.set("patch.size", "224");
    kv.set("localizer.anchor_scales", "96,192,384");
    *this = from_config(kv);
}

std::uint64_t PipelineConfig::stage_seed(const char* stage) const {
    return mix64(seed ^ rng_tag(stage));
}

// ---------------------------------------------------------------------------
// Fusion cache serialization

FusionInputs CaseRecord::fusion_inputs() const {
    FusionInputs in;
    in.p_density = p_density;
    in.density_feature = density_feature;
    for (int v = 0; v < kNumViews; ++v) {
        in.p_findings[v] = views[v].p_findings;
        in.detections[v] = views[v].detections;
        in.findings_features[v] = views[v].findings_feature;
        in.background_features[v] = views[v].background_feature;
    }
    return in;
}

void FusionCache::save(const std::string& path) const {
    Checkpoint ckpt;
    ckpt.config["kind"] = "fusion_cache";
    ckpt.config["feature_width"] = std::to_string(feature_width);
    ckpt.config["has_nopre"] = has_nopre ? "1" : "0";
    ckpt.config["layout"] = layout_note;
    std::string ids;
    for (const auto& c : cases) ids += (ids.empty() ? "" : ",") + c.case_id;
    ckpt.config["cases"] = ids;

    for (const auto& c : cases) {
        const std::string p = c.case_id + ".";
        ckpt.put(p + "scores", {9},
                 {c.p_density, c.views[0].p_density_view, c.views[1].p_density_view,
                  c.views[2].p_density_view, c.views[3].p_density_view, c.views[0].p_findings,
                  c.views[1].p_findings, c.views[2].p_findings, c.views[3].p_findings});
        ckpt.put(p + "scores_nopre", {4},
                 {c.views[0].p_findings_nopre, c.views[1].p_findings_nopre,
                  c.views[2].p_findings_nopre, c.views[3].p_findings_nopre});
        ckpt.put(p + "labels", {8},
                 {static_cast<double>(static_cast<int>(c.split)),
                  static_cast<double>(static_cast<int>(c.labels.density_super)),
                  c.labels.has_lesion ? 1.0 : 0.0, c.labels.is_malignant ? 1.0 : 0.0,
                  static_cast<double>(c.views[0].has_lesion), static_cast<double>(c.views[1].has_lesion),
                  static_cast<double>(c.views[2].has_lesion), static_cast<double>(c.views[3].has_lesion)});
        ckpt.put(p + "density_feature", {static_cast<int>(c.density_feature.size())}, c.density_feature);
        for (int v = 0; v < kNumViews; ++v) {
            const ViewRecord& vr = c.views[v];
            const std::string vp = p + "v" + std::to_string(v) + ".";
            ckpt.put(vp + "findings_feature", {static_cast<int>(vr.findings_feature.size())},
                     vr.findings_feature);
            ckpt.put(vp + "background_feature", {static_cast<int>(vr.background_feature.size())},
                     vr.background_feature);
            std::vector<double> det;
            int k = static_cast<int>(vr.detections.size());
            for (const Detection& d : vr.detections) {
                det.push_back(static_cast<double>(static_cast<int>(d.cls)));
                det.push_back(d.confidence);
                det.push_back(d.box.x_min);
                det.push_back(d.box.y_min);
                det.push_back(d.box.x_max);
                det.push_back(d.box.y_max);
                det.insert(det.end(), d.feature.begin(), d.feature.end());
            }
            ckpt.put(vp + "det", {k, k > 0 ? static_cast<int>(det.size()) / k : 0}, det);
            std::vector<double> gt;
            for (const GroundTruthBox& g : vr.ground_truths) {
                gt.push_back(static_cast<double>(static_cast<int>(g.cls)));
                gt.push_back(g.box.x_min);
                gt.push_back(g.box.y_min);
                gt.push_back(g.box.x_max);
                gt.push_back(g.box.y_max);
            }
            ckpt.put(vp + "gt", {static_cast<int>(vr.ground_truths.size()), 5}, gt);
        }
    }
    ckpt.save(path);
}

FusionCache FusionCache::load(const std::string& path) {
    Checkpoint ckpt = Checkpoint::load(path);
    if (!ckpt.config.count("kind") || ckpt.config.at("kind") != "fusion_cache") {
        throw DataError("not a fusion cache: " + path);
    }
    FusionCache cache;
    cache.feature_width = static_cast<int>(parse_int(ckpt.config.at("feature_width"), "feature_width"));
    cache.has_nopre = ckpt.config.at("has_nopre") == "1";
    cache.layout_note = ckpt.config.at("layout");
    for (const std::string& id : split(ckpt.config.at("cases"), ',')) {
        if (id.empty()) continue;
        CaseRecord c;
        c.case_id = id;
        const std::string p = id + ".";
        const auto& scores = ckpt.get(p + "scores");
        c.p_density = scores[0];
        const auto& nopre = ckpt.get(p + "scores_nopre");
        const auto& labels = ckpt.get(p + "labels");
        c.split = static_cast<SplitName>(static_cast<int>(labels[0]));
        c.labels.density_super = static_cast<DensitySuper>(static_cast<int>(labels[1]));
        c.labels.has_lesion = labels[2] != 0.0;
        c.labels.is_malignant = labels[3] != 0.0;
        c.labels.lesion_category = LesionCategory::normal;   // not stored; unused downstream
        c.labels.pathology_category = c.labels.is_malignant ? PathologyCategory::malignant
                                      : c.labels.has_lesion ? PathologyCategory::benign
                                                            : PathologyCategory::normal;
        c.density_feature = ckpt.get(p + "density_feature");
        for (int v = 0; v < kNumViews; ++v) {
            ViewRecord& vr = c.views[v];
            vr.p_density_view = scores[1 + v];
            vr.p_findings = scores[5 + v];
            vr.p_findings_nopre = nopre[v];
            vr.has_lesion = static_cast<int>(labels[4 + v]);
            const std::string vp = p + "v" + std::to_string(v) + ".";
            vr.findings_feature = ckpt.get(vp + "findings_feature");
            vr.background_feature = ckpt.get(vp + "background_feature");
            const auto& det = ckpt.get(vp + "det");
            const auto& det_shape = ckpt.shape(vp + "det");
            int k = det_shape[0];
            int row = k > 0 ? det_shape[1] : 0;
            for (int i = 0; i < k; ++i) {
                const double* r = det.data() + static_cast<std::size_t>(i) * row;
                Detection d;
                d.cls = static_cast<LesionClass>(static_cast<int>(r[0]));
                d.confidence = r[1];
                d.box = BBox{r[2], r[3], r[4], r[5]};
                d.feature.assign(r + 6, r + row);
                vr.detections.push_back(std::move(d));
            }
            const auto& gt = ckpt.get(vp + "gt");
            const auto& gt_shape = ckpt.shape(vp + "gt");
            for (int i = 0; i < gt_shape[0]; ++i) {
                const double* r = gt.data() + static_cast<std::size_t>(i) * 5;
                GroundTruthBox g;
                g.cls = static_cast<LesionClass>(static_cast<int>(r[0]));
                g.box = BBox{r[1], r[2], r[3], r[4]};
                vr.ground_truths.push_back(g);
            }
        }
        cache.cases.push_back(std::move(c));
    }
    return cache;
}

std::vector<const CaseRecord*> FusionCache::of_split(SplitName s) const {
    std::vector<const CaseRecord*> out;
    for (const auto& c : cases) {
        if (c.split == s) out.push_back(&c);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Shared stage helpers

namespace {

void write_config_echo(const PipelineConfig& cfg, const PipelinePaths& paths) {
    fs::create_directories(paths.out);
    cfg.merged.save(paths.config_echo());
}

LoadedDataset load_pipeline_dataset(const PipelineConfig& cfg, const PipelinePaths& paths) {
    std::string manifest = cfg.synthetic ? paths.manifest() : cfg.manifest_path;
    if (!fs::exists(manifest)) {
        throw MissingArtifactError("missing manifest: " + manifest +
                                   (cfg.synthetic ? " (run generate)" : ""));
    }
    LoadedDataset ds = load_manifest(manifest);
    std::sort(ds.exams.begin(), ds.exams.end(),
              [](const Exam& a, const Exam& b) { return a.case_id < b.case_id; });
    return ds;
}

std::map<std::string, SplitName> read_split_assignments(const PipelinePaths& paths) {
    if (!fs::exists(paths.split_csv())) {
        throw MissingArtifactError("missing split: " + paths.split_csv() + " (run split)");
    }
    auto rows = read_csv(paths.split_csv());
    std::map<std::string, SplitName> out;
    for (std::size_t i = 1; i < rows.size(); ++i) {
        if (rows[i].size() < 2) continue;
        const std::string& name = rows[i][1];
        SplitName s = name == "train" ? SplitName::train
                      : name == "validation" ? SplitName::validation
                                             : SplitName::test;
        out[rows[i][0]] = s;
    }
    return out;
}

void write_train_log(const std::string& path, const nn::TrainLog& log) {
    std::vector<CsvRow> rows;
    rows.push_back({"epoch", "split", "loss", "auc"});
    for (const auto& e : log.epochs) {
        rows.push_back({std::to_string(e.epoch), "train", format_double(e.train_loss), ""});
        rows.push_back({std::to_string(e.epoch), "validation", format_double(e.val_loss),
                        format_double(e.val_auc)});
    }
    write_csv(path, rows);
}

struct PreparedCase {
    const Exam* exam = nullptr;
    SplitName split = SplitName::train;
    CaseLabels labels;
    std::array<PreparedView, kNumViews> views;
    std::array<std::vector<BBox>, kNumViews> boxes;          // profile coordinates
    std::array<std::vector<LesionClass>, kNumViews> classes;
    std::array<std::pair<int, int>, kNumViews> original_dims;  // (h, w)
};

// Prepares every case of the requested splits at one profile.
std::vector<PreparedCase> prepare_cases(const std::vector<Exam>& exams,
                                        const std::map<std::string, SplitName>& assignment,
                                        const PreprocessProfile& profile,
                                        const std::set<SplitName>& wanted) {
    std::vector<PreparedCase> out;
    for (const Exam& exam : exams) {
        auto it = assignment.find(exam.case_id);
        if (it == assignment.end() || !wanted.count(it->second)) continue;
        PreparedCase pc;
        pc.exam = &exam;
        pc.split = it->second;
        pc.labels = derive_case_labels(exam);
        for (ViewKey v : all_views()) {
            Image raw = load_image(exam.image(v));
            pc.original_dims[v.index()] = {raw.height, raw.width};
            pc.views[v.index()] = prepare_view(raw, profile);
            for (const LesionAnnotation& l : exam.lesions_in_view(v)) {
                pc.boxes[v.index()].push_back(scale_box(l.box, raw.height, raw.width,
                                                        profile.target_height, profile.target_width));
                pc.classes[v.index()].push_back(l.cls());
            }
        }
        out.push_back(std::move(pc));
    }
    return out;
}

std::string fusion_head_name(ScoreHeadKind kind, FusionTarget target, bool include_density) {
    std::string name = "score_" + to_string(kind) + "_" + to_string(target);
    if (!include_density) name += "_nodensity";
    return name;
}

std::string feature_head_name(FusionTarget target, bool include_density) {
    std::string name = "feat_" + to_string(target);
    if (!include_density) name += "_nodensity";
    return name;
}

}  // namespace

// ---------------------------------------------------------------------------
// generate / split

void cmd_generate(const PipelineConfig& cfg) {
    PipelinePaths paths{cfg.out_dir};
    fs::create_directories(paths.out);
    DirectoryLock lock(paths.lock(), cfg.force);
    write_config_echo(cfg, paths);
    if (!cfg.synthetic) throw ConfigError("generate requires data.source = synthetic");

    if (fs::exists(paths.data_dir()) && !fs::is_empty(paths.data_dir()) && !cfg.force) {
        throw DataError("output data directory is not empty: " + paths.data_dir() +
                        " (pass --force to overwrite)");
    }
    fs::remove_all(paths.data_dir());
    fs::create_directories(paths.data_dir());
    std::vector<Exam> exams = generate_dataset(cfg.synth);
    emit_dataset(cfg.synth, exams, paths.data_dir());
}

void cmd_split(const PipelineConfig& cfg) {
    PipelinePaths paths{cfg.out_dir};
    fs::create_directories(paths.out);
    DirectoryLock lock(paths.lock(), cfg.force);
    write_config_echo(cfg, paths);

    LoadedDataset ds = load_pipeline_dataset(cfg, paths);
    fs::create_directories(paths.split_dir());

    {
        std::vector<CsvRow> rows;
        rows.push_back({"case_id", "reason"});
        for (const auto& r : ds.report.rejections) rows.push_back({r.case_id, r.reason});
        write_csv(paths.load_report(), rows);
    }

    SplitResult result = split_dataset(ds.exams, cfg.ratios, cfg.strata, cfg.stage_seed("split"));

    std::map<std::string, SplitName> assignment;
    for (int s = 0; s < 3; ++s) {
        for (const auto& id : result.split.of(static_cast<SplitName>(s))) {
            assignment[id] = static_cast<SplitName>(s);
        }
    }
    std::vector<CsvRow> rows;
    rows.push_back({"case_id", "split", "density", "lesion_category", "pathology_category"});
    for (const Exam& exam : ds.exams) {
        CaseLabels labels = derive_case_labels(exam);
        rows.push_back({exam.case_id, split_name(assignment.at(exam.case_id)), to_string(exam.density),
                        to_string(labels.lesion_category), to_string(labels.pathology_category)});
    }
    write_csv(paths.split_csv(), rows);

    std::vector<CsvRow> warn_rows;
    warn_rows.push_back({"stratum", "warning"});
    for (const auto& w : result.warnings) warn_rows.push_back({w.stratum, w.message});
    write_csv(paths.split_warnings(), warn_rows);
}

// ---------------------------------------------------------------------------
// train

namespace {

void train_density_stage(const PipelineConfig& cfg, const PipelinePaths& paths) {
    LoadedDataset ds = load_pipeline_dataset(cfg, paths);
    auto assignment = read_split_assignments(paths);
    auto prepared = prepare_cases(ds.exams, assignment, cfg.density_profile,
                                  {SplitName::train, SplitName::validation});

    LabeledImageSet train_views, val_views;
    PatientDensitySet train_cases, val_cases;
    for (const PreparedCase& pc : prepared) {
        int label = pc.labels.density_super == DensitySuper::dense ? 1 : 0;
        LabeledImageSet& views = pc.split == SplitName::train ? train_views : val_views;
        PatientDensitySet& cases = pc.split == SplitName::train ? train_cases : val_cases;
        std::array<Image, kNumViews> case_views;
        for (int v = 0; v < kNumViews; ++v) {
            views.images.push_back(pc.views[v].image);
            views.labels.push_back(label);
            case_views[v] = pc.views[v].image;
        }
        cases.cases.push_back(std::move(case_views));
        cases.labels.push_back(label);
    }

    BackboneConfig backbone = cfg.backbone;
    backbone.input_profile = cfg.density_profile;

    AugmentationPolicy view_policy;
    view_policy.horizontal_flip = true;
    view_policy.rotation_degrees = {-15.0, 15.0};
    view_policy.crop_scale = {0.85, 1.0};
    view_policy.shear = true;

    DensityViewModel view_model(backbone, cfg.stage_seed("density_view"));
    nn::TrainConfig view_cfg = cfg.density_view_cfg;
    view_cfg.seed = cfg.stage_seed("density_view_train");
    nn::TrainLog view_log = train_density_view(view_model, train_views, val_views, view_cfg, view_policy);

    // Patient stage: branches start from the averaged view weights; horizontal
    // flips are dropped to keep breast position, blur and grid warp added.
    AugmentationPolicy patient_policy;
    patient_policy.rotation_degrees = {-15.0, 15.0};
    patient_policy.crop_scale = {0.85, 1.0};
    patient_policy.blur = true;
    patient_policy.grid_distortion = true;

    DensityPatientModel patient_model(backbone, cfg.stage_seed("density_patient"));
    patient_model.init_branches_from(view_model);
    nn::TrainConfig patient_cfg = cfg.density_patient_cfg;
    patient_cfg.seed = cfg.stage_seed("density_patient_train");
    nn::TrainLog patient_log =
        train_density_patient(patient_model, train_cases, val_cases, patient_cfg, patient_policy);

    fs::create_directories(paths.checkpoints_dir());
    fs::create_directories(paths.log_dir());
    view_model.to_checkpoint().save(paths.checkpoint("density_view"));
    patient_model.to_checkpoint().save(paths.checkpoint("density_patient"));
    write_train_log(paths.train_log("density_view"), view_log);
    write_train_log(paths.train_log("density_patient"), patient_log);
}

void train_findings_stage(const PipelineConfig& cfg, const PipelinePaths& paths) {
    LoadedDataset ds = load_pipeline_dataset(cfg, paths);
    auto assignment = read_split_assignments(paths);
    auto prepared = prepare_cases(ds.exams, assignment, cfg.findings_profile,
                                  {SplitName::train, SplitName::validation});

    // Patch sets come from the same prepared views the model trains on.
    LabeledImageSet train_patches, val_patches;
    LabeledImageSet train_images, val_images;
    Rng patch_rng(cfg.stage_seed("patch_sampling"));
    for (const PreparedCase& pc : prepared) {
        bool is_train = pc.split == SplitName::train;
        for (int v = 0; v < kNumViews; ++v) {
            Rng view_rng = patch_rng.fork(rng_tag(pc.exam->case_id.c_str()), v);
            PatchSampleResult sampled =
                sample_patches(pc.views[v].image, pc.views[v].mask, pc.boxes[v], cfg.patch_size,
                               cfg.patches_per_lesion, cfg.patches_per_normal, view_rng);
            LabeledImageSet& patches = is_train ? train_patches : val_patches;
            for (Patch& patch : sampled.patches) {
                patches.images.push_back(std::move(patch.image));
                patches.labels.push_back(patch.label == PatchLabel::lesion ? 1 : 0);
            }
            LabeledImageSet& images = is_train ? train_images : val_images;
            images.images.push_back(pc.views[v].image);
            images.labels.push_back(pc.boxes[v].empty() ? 0 : 1);
        }
    }

    BackboneConfig patch_backbone = cfg.backbone;
    patch_backbone.input_profile = PreprocessProfile{cfg.patch_size, cfg.patch_size,
                                                     IntensityMode::rescale_0_1_zscore, cfg.scale};

    AugmentationPolicy patch_policy;
    patch_policy.horizontal_flip = true;
    patch_policy.vertical_flip = true;
    patch_policy.rotation_degrees = {-15.0, 15.0};
    patch_policy.crop_scale = {0.85, 1.0};
    patch_policy.transpose = true;
    patch_policy.shift_scale_rotate = true;

    PatchClassifier patch_model(patch_backbone, cfg.stage_seed("patch"));
    nn::TrainConfig patch_cfg = cfg.patch_cfg;
    patch_cfg.seed = cfg.stage_seed("patch_train");
    nn::TrainLog patch_log =
        train_patch_classifier(patch_model, train_patches, val_patches, patch_cfg, patch_policy);

    BackboneConfig findings_backbone = cfg.backbone;
    findings_backbone.input_profile = cfg.findings_profile;

    AugmentationPolicy findings_policy;
    findings_policy.horizontal_flip = true;
    findings_policy.vertical_flip = true;
    findings_policy.rotation_degrees = {-15.0, 15.0};
    findings_policy.crop_scale = {0.85, 1.0};

    FindingsModel findings(findings_backbone, cfg.stage_seed("findings"));
    findings.init_backbone_from(patch_model);
    nn::TrainConfig findings_cfg = cfg.findings_cfg;
    findings_cfg.seed = cfg.stage_seed("findings_train");
    nn::TrainLog findings_log =
        train_findings(findings, train_images, val_images, findings_cfg, findings_policy);

    fs::create_directories(paths.checkpoints_dir());
    fs::create_directories(paths.log_dir());
    patch_model.to_checkpoint().save(paths.checkpoint("patch"));
    findings.to_checkpoint().save(paths.checkpoint("findings"));
    write_train_log(paths.train_log("patch"), patch_log);
    write_train_log(paths.train_log("findings"), findings_log);

    if (cfg.findings_pretrain_ablation) {
        // Same schedule and seed, but no patch initialization.
        FindingsModel nopre(findings_backbone, cfg.stage_seed("findings"));
        nn::TrainLog nopre_log =
            train_findings(nopre, train_images, val_images, findings_cfg, findings_policy);
        nopre.to_checkpoint().save(paths.checkpoint("findings_nopre"));
        write_train_log(paths.train_log("findings_nopre"), nopre_log);
    }
}

void train_localizer_stage(const PipelineConfig& cfg, const PipelinePaths& paths) {
    LoadedDataset ds = load_pipeline_dataset(cfg, paths);
    auto assignment = read_split_assignments(paths);
    auto prepared =
        prepare_cases(ds.exams, assignment, cfg.localization_profile, {SplitName::train});

    std::vector<Localizer::TrainSample> samples;
    for (PreparedCase& pc : prepared) {
        for (int v = 0; v < kNumViews; ++v) {
            if (pc.boxes[v].empty()) continue;  // only views with lesions train the detector
            Localizer::TrainSample s;
            s.image = std::move(pc.views[v].image);
            s.boxes = pc.boxes[v];
            s.classes = pc.classes[v];
            samples.push_back(std::move(s));
        }
    }
    if (samples.empty()) throw DataError("no annotated lesions available for localizer training");

    Localizer model(cfg.localizer_model, cfg.stage_seed("localizer"));
    nn::TrainConfig loc_cfg = cfg.localizer_cfg;
    loc_cfg.seed = cfg.stage_seed("localizer_train");
    Localizer::TrainStats stats = model.train(samples, loc_cfg, cfg.box_jitter_ratio);

    fs::create_directories(paths.checkpoints_dir());
    fs::create_directories(paths.log_dir());
    model.to_checkpoint().save(paths.checkpoint("localizer"));
    std::vector<CsvRow> rows;
    rows.push_back({"interval", "mean_loss"});
    for (std::size_t i = 0; i < stats.loss_per_log_interval.size(); ++i) {
        rows.push_back({std::to_string(i), format_double(stats.loss_per_log_interval[i])});
    }
    write_csv(paths.train_log("localizer"), rows);
}

struct FusionDataset {
    std::vector<const CaseRecord*> train, val;
    std::vector<int> train_labels, val_labels;
};

FusionDataset fusion_dataset(const FusionCache& cache, FusionTarget target) {
    FusionDataset out;
    out.train = cache.of_split(SplitName::train);
    out.val = cache.of_split(SplitName::validation);
    auto label_of = [&](const CaseRecord* c) {
        return target == FusionTarget::lesion ? (c->labels.has_lesion ? 1 : 0)
                                              : (c->labels.is_malignant ? 1 : 0);
    };
    for (const auto* c : out.train) out.train_labels.push_back(label_of(c));
    for (const auto* c : out.val) out.val_labels.push_back(label_of(c));
    return out;
}

void train_fusion_stage(const PipelineConfig& cfg, const PipelinePaths& paths) {
    for (const char* name : {"density_patient", "findings", "localizer"}) {
        if (!fs::exists(paths.checkpoint(name))) {
            throw MissingArtifactError(std::string("missing checkpoint: ") +
                                       (std::string(name) == "density_patient" ? "density" : name) +
                                       " (run train " +
                                       (std::string(name) == "density_patient" ? "density" : name) + ")");
        }
    }
    if (!fs::exists(paths.fusion_cache())) {
        throw MissingArtifactError("missing fusion cache: " + paths.fusion_cache() + " (run extract)");
    }
    FusionCache cache = FusionCache::load(paths.fusion_cache());
    fs::create_directories(paths.fusion_dir());

    std::vector<CsvRow> selection;
    selection.push_back({"target", "density_inputs", "head", "n", "grid_choice", "validation_auc",
                         "selected"});

    std::vector<bool> density_variants = {true};
    if (cfg.fusion_density_ablation) density_variants.push_back(false);

    for (FusionTarget target : {FusionTarget::lesion, FusionTarget::malignancy}) {
        FusionDataset data = fusion_dataset(cache, target);
        if (data.train.empty() || data.val.empty()) {
            throw DataError("fusion training requires non-empty train and validation splits");
        }
        for (bool include_density : density_variants) {
            // Score heads: grid over n and per-head hyper-parameters.
            for (ScoreHeadKind kind :
                 {ScoreHeadKind::mlp, ScoreHeadKind::svm_rbf, ScoreHeadKind::random_forest}) {
                ScoreFusionTraining best;
                double best_auc = -1.0;
                int best_n = 0;
                for (int n : cfg.fusion_n_grid) {
                    FusionConfig fc{n, target, include_density};
                    std::vector<FusionVector> train_vecs, val_vecs;
                    for (const auto* c : data.train) train_vecs.push_back(build_score_vector(c->fusion_inputs(), fc));
                    for (const auto* c : data.val) val_vecs.push_back(build_score_vector(c->fusion_inputs(), fc));
                    ScoreFusionTraining trained =
                        train_score_fusion(train_vecs, data.train_labels, val_vecs, data.val_labels,
                                           kind, cfg.stage_seed("score_fusion") ^ n);
                    double auc = 0.0;
                    for (const auto& g : trained.grid_log) {
                        if (g.description == trained.head.grid_choice) auc = g.validation_auc;
                    }
                    selection.push_back({to_string(target), include_density ? "yes" : "no",
                                         to_string(kind), std::to_string(n), trained.head.grid_choice,
                                         format_double(auc), ""});
                    if (auc > best_auc) {
                        best_auc = auc;
                        best = std::move(trained);
                        best_n = n;
                    }
                }
                best.head.target = target;
                best.head.to_checkpoint().save(
                    paths.fusion_head(fusion_head_name(kind, target, include_density)));
                selection.push_back({to_string(target), include_density ? "yes" : "no", to_string(kind),
                                     std::to_string(best_n), best.head.grid_choice,
                                     format_double(best_auc), "selected"});
            }

            // Feature fusion: grid over n, normalizer fit on training bundles.
            double best_auc = -1.0;
            int best_n = 0;
            std::shared_ptr<EmbeddingNet> best_net;
            Normalizer best_normalizer;
            for (int n : cfg.fusion_n_grid) {
                FusionConfig fc{n, target, include_density};
                std::vector<FeatureBundle> train_bundles, val_bundles;
                std::vector<std::vector<double>> train_flat;
                for (const auto* c : data.train) {
                    train_bundles.push_back(build_feature_bundle(c->fusion_inputs(), fc, cache.feature_width));
                    train_flat.push_back(train_bundles.back().flatten());
                }
                Normalizer norm = Normalizer::fit(train_flat);
                for (auto& b : train_bundles) {
                    b = FeatureBundle::unflatten(norm.apply(b.flatten()), b.layout, cache.feature_width);
                }
                for (const auto* c : data.val) {
                    FeatureBundle b = build_feature_bundle(c->fusion_inputs(), fc, cache.feature_width);
                    val_bundles.push_back(
                        FeatureBundle::unflatten(norm.apply(b.flatten()), b.layout, cache.feature_width));
                }
                EmbeddingNetConfig net_cfg = cfg.embedding;
                net_cfg.feature_width = cache.feature_width;
                net_cfg.n = n;
                net_cfg.include_density = include_density;
                nn::TrainConfig tc = cfg.feature_fusion_cfg;
                tc.seed = cfg.stage_seed("feature_fusion") ^ n;
                FeatureFusionTraining trained = train_feature_fusion(
                    train_bundles, data.train_labels, val_bundles, data.val_labels, net_cfg, tc);
                selection.push_back({to_string(target), include_density ? "yes" : "no", "embedding",
                                     std::to_string(n), "n=" + std::to_string(n),
                                     format_double(trained.validation_auc), ""});
                if (trained.validation_auc > best_auc) {
                    best_auc = trained.validation_auc;
                    best_net = trained.net;
                    best_n = n;
                    best_normalizer = norm;
                }
            }
            Checkpoint net_ckpt = best_net->to_checkpoint();
            net_ckpt.config["target"] = to_string(target);
            auto nblob = best_normalizer.pack();
            net_ckpt.put("normalizer", {static_cast<int>(nblob.size())}, nblob);
            net_ckpt.save(paths.fusion_head(feature_head_name(target, include_density)));
            selection.push_back({to_string(target), include_density ? "yes" : "no", "embedding",
                                 std::to_string(best_n), "n=" + std::to_string(best_n),
                                 format_double(best_auc), "selected"});
        }
    }
    write_csv(paths.fusion_selection_log(), selection);
}

}  // namespace

void cmd_train(const PipelineConfig& cfg, const std::string& stage) {
    PipelinePaths paths{cfg.out_dir};
    fs::create_directories(paths.out);
    DirectoryLock lock(paths.lock(), cfg.force);
    write_config_echo(cfg, paths);

    if (stage == "density") train_density_stage(cfg, paths);
    else if (stage == "findings") train_findings_stage(cfg, paths);
    else if (stage == "localizer") train_localizer_stage(cfg, paths);
    else if (stage == "fusion") train_fusion_stage(cfg, paths);
    else throw ConfigError("unknown training stage '" + stage + "' (density|findings|localizer|fusion)");
}

// ---------------------------------------------------------------------------
// extract

void cmd_extract(const PipelineConfig& cfg) {
    PipelinePaths paths{cfg.out_dir};
    fs::create_directories(paths.out);
    DirectoryLock lock(paths.lock(), cfg.force);
    write_config_echo(cfg, paths);

    for (const char* name : {"density_view", "density_patient", "findings", "localizer"}) {
        if (!fs::exists(paths.checkpoint(name))) {
            std::string stage = std::string(name).substr(0, 7) == "density" ? "density"
                                : std::string(name) == "findings" ? "findings"
                                                                  : "localizer";
            throw MissingArtifactError("missing checkpoint: " + std::string(name) + " (run train " +
                                       stage + ")");
        }
    }

    DensityViewModel view_model = DensityViewModel::from_checkpoint(Checkpoint::load(paths.checkpoint("density_view")));
    DensityPatientModel patient_model =
        DensityPatientModel::from_checkpoint(Checkpoint::load(paths.checkpoint("density_patient")));
    FindingsModel findings = FindingsModel::from_checkpoint(Checkpoint::load(paths.checkpoint("findings")));
    Localizer localizer = Localizer::from_checkpoint(Checkpoint::load(paths.checkpoint("localizer")));
    std::optional<FindingsModel> findings_nopre;
    if (fs::exists(paths.checkpoint("findings_nopre"))) {
        findings_nopre = FindingsModel::from_checkpoint(Checkpoint::load(paths.checkpoint("findings_nopre")));
    }

    LoadedDataset ds = load_pipeline_dataset(cfg, paths);
    auto assignment = read_split_assignments(paths);

    FusionCache cache;
    cache.feature_width = cfg.backbone.feature_width;
    cache.has_nopre = findings_nopre.has_value();
    cache.layout_note = FusionLayout{true, 1}.describe(FusionTarget::lesion);

    for (const Exam& exam : ds.exams) {
        auto it = assignment.find(exam.case_id);
        if (it == assignment.end()) continue;
        CaseRecord rec;
        rec.case_id = exam.case_id;
        rec.split = it->second;
        rec.labels = derive_case_labels(exam);

        std::array<Image, kNumViews> density_views;
        for (ViewKey v : all_views()) {
            int vi = v.index();
            Image raw = load_image(exam.image(v));
            ViewRecord& vr = rec.views[vi];

            PreparedView density_prepared = prepare_view(raw, cfg.density_profile);
            density_views[vi] = std::move(density_prepared.image);
            vr.p_density_view = predict_density_view(view_model, density_views[vi]);

            PreparedView findings_prepared = prepare_view(raw, cfg.findings_profile);
            FindingsPrediction fp = predict_findings(findings, findings_prepared.image);
            vr.p_findings = fp.p_findings;
            vr.findings_feature = std::move(fp.feature);
            if (findings_nopre) {
                vr.p_findings_nopre = predict_findings(*findings_nopre, findings_prepared.image).p_findings;
            }

            PreparedView loc_prepared = prepare_view(raw, cfg.localization_profile);
            DetectionSet det = localizer.detect(loc_prepared.image);
            vr.background_feature = std::move(det.background_feature);
            for (Detection& d : det.detections) {
                d.box = scale_box(d.box, cfg.localization_profile.target_height,
                                  cfg.localization_profile.target_width, raw.height, raw.width);
                vr.detections.push_back(std::move(d));
            }
            for (const LesionAnnotation& l : exam.lesions_in_view(v)) {
                vr.ground_truths.push_back({l.box, l.cls()});
                vr.has_lesion = 1;
            }
        }
        DensityPrediction dp = predict_density(patient_model, density_views);
        rec.p_density = dp.p_dense;
        rec.density_feature = std::move(dp.feature);
        cache.cases.push_back(std::move(rec));
    }

    fs::create_directories(paths.cache_dir());
    cache.save(paths.fusion_cache());
}

// ---------------------------------------------------------------------------
// evaluate / report

namespace {

struct EvalData {
    // One row per (target, model): scalar metrics and curve file stems.
    std::vector<CsvRow> summary_rows;
    std::map<std::string, MetricsReport> fusion_reports;  // per target
    std::vector<std::string> fusion_model_names;
};

std::string metric_or_na(double v, bool defined) {
    return defined ? format_double(v) : "na";
}

void append_report_line(std::string& report, const std::string& model, const std::string& target,
                        const ReportEntry& e, const std::vector<std::string>& peer_names,
                        const std::vector<WilcoxonResult>& pvals) {
    report += "model=" + model + " target=" + target;
    report += " auc=" + format_double(e.auc);
    report += " auprc=" + format_double(e.auprc_value);
    report += " f1=" + format_double(e.f1);
    report += " tpr=" + format_double(e.tpr);
    report += " tnr=" + format_double(e.tnr);
    report += " acc=" + format_double(e.accuracy);
    for (std::size_t j = 0; j < peer_names.size(); ++j) {
        if (peer_names[j] == model) continue;
        report += " p_vs_" + peer_names[j] + "=" + format_double(pvals[j].p_value);
    }
    report += "\n";
}

Curve read_curve_csv(const std::string& path) {
    Curve curve;
    for (auto& row : read_csv(path)) {
        if (row.size() < 3 || row[0] == "threshold") continue;
        CurvePoint p;
        p.threshold = std::strtod(row[0].c_str(), nullptr);
        p.x = std::strtod(row[1].c_str(), nullptr);
        p.y = std::strtod(row[2].c_str(), nullptr);
        curve.push_back(p);
    }
    return curve;
}

// Renders report.txt and the SVG plots from the CSV artifacts written by
// evaluate, so `report` can re-emit without the cache.
void render_report_from_artifacts(const PipelinePaths& paths) {
    std::string eval_dir = paths.eval_dir();
    if (!fs::exists(eval_dir + "/report_data.csv")) {
        throw MissingArtifactError("missing evaluation artifacts under " + eval_dir + " (run evaluate)");
    }

    std::string report;
    report += "# patient-level models\n";
    auto data_rows = read_csv(eval_dir + "/report_data.csv");
    std::map<std::string, std::map<std::string, std::map<std::string, std::string>>> pmat;
    for (const std::string& target : {"lesion", "malignancy"}) {
        std::string ppath = eval_dir + "/pvalues_" + target + ".csv";
        if (!fs::exists(ppath)) continue;
        auto rows = read_csv(ppath);
        if (rows.empty()) continue;
        for (std::size_t i = 1; i < rows.size(); ++i) {
            for (std::size_t j = 1; j < rows[0].size() && j < rows[i].size(); ++j) {
                pmat[target][rows[i][0]][rows[0][j]] = rows[i][j];
            }
        }
    }
    for (std::size_t i = 1; i < data_rows.size(); ++i) {
        const CsvRow& r = data_rows[i];
        if (r.size() < 8) continue;
        report += "model=" + r[0] + " target=" + r[1] + " auc=" + r[2] + " auprc=" + r[3] +
                  " f1=" + r[4] + " tpr=" + r[5] + " tnr=" + r[6] + " acc=" + r[7];
        auto t = pmat.find(r[1]);
        if (t != pmat.end()) {
            auto m = t->second.find(r[0]);
            if (m != t->second.end()) {
                for (const auto& [peer, p] : m->second) {
                    if (peer != r[0]) report += " p_vs_" + peer + "=" + p;
                }
            }
        }
        report += "\n";
    }

    for (const char* extra : {"density_section.txt", "findings_section.txt", "froc_section.txt"}) {
        std::string path = eval_dir + "/" + extra;
        if (fs::exists(path)) report += read_text_file(path);
    }
    write_text_file(paths.report(), report);

    // Re-render plots from curve CSVs.
    std::string curves_dir = eval_dir + "/curves";
    std::string plots_dir = eval_dir + "/plots";
    fs::create_directories(plots_dir);
    for (const std::string& target : {"lesion", "malignancy"}) {
        std::vector<PlotSeries> series;
        if (!fs::exists(curves_dir)) break;
        for (const auto& entry : fs::directory_iterator(curves_dir)) {
            std::string name = entry.path().filename().string();
            std::string prefix = "roc_" + target + "_";
            if (name.rfind(prefix, 0) == 0) {
                std::string model = name.substr(prefix.size());
                model = model.substr(0, model.size() - 4);
                series.push_back({model, read_curve_csv(entry.path().string())});
            }
        }
        std::sort(series.begin(), series.end(),
                  [](const PlotSeries& a, const PlotSeries& b) { return a.name < b.name; });
        if (!series.empty()) {
            write_svg_plot(plots_dir + "/roc_" + target + ".svg", "patient models (" + target + ")",
                           "false positive rate", "true positive rate", series);
        }
    }
    if (fs::exists(curves_dir)) {
        std::vector<PlotSeries> froc_series;
        for (const auto& entry : fs::directory_iterator(curves_dir)) {
            std::string name = entry.path().filename().string();
            if (name.rfind("froc_", 0) == 0) {
                std::string cls = name.substr(5, name.size() - 9);
                froc_series.push_back({cls, read_curve_csv(entry.path().string())});
            }
        }
        std::sort(froc_series.begin(), froc_series.end(),
                  [](const PlotSeries& a, const PlotSeries& b) { return a.name < b.name; });
        if (!froc_series.empty()) {
            double max_fpi = 0.0;
            for (const auto& s : froc_series) {
                for (const auto& p : s.points) max_fpi = std::max(max_fpi, p.x);
            }
            write_svg_plot(plots_dir + "/froc.svg", "lesion localization", "false positives per image",
                           "lesion true positive rate", froc_series, std::max(1.0, max_fpi));
        }
        std::vector<PlotSeries> density_series;
        for (const char* name : {"roc_density_D.csv", "roc_density_mean_Dv.csv"}) {
            std::string path = curves_dir + "/" + std::string(name);
            if (fs::exists(path)) {
                std::string model = std::string(name).substr(12);
                model = model.substr(0, model.size() - 4);
                density_series.push_back({model, read_curve_csv(path)});
            }
        }
        if (!density_series.empty()) {
            write_svg_plot(plots_dir + "/roc_density.svg", "breast density", "false positive rate",
                           "true positive rate", density_series);
        }
    }
}

}  // namespace

void cmd_evaluate(const PipelineConfig& cfg) {
    PipelinePaths paths{cfg.out_dir};
    fs::create_directories(paths.out);
    DirectoryLock lock(paths.lock(), cfg.force);
    write_config_echo(cfg, paths);

    if (!fs::exists(paths.fusion_cache())) {
        throw MissingArtifactError("missing fusion cache: " + paths.fusion_cache() + " (run extract)");
    }
    FusionCache cache = FusionCache::load(paths.fusion_cache());
    auto test_cases = cache.of_split(SplitName::test);
    if (test_cases.empty()) throw DataError("evaluation requires a non-empty test split");

    fs::create_directories(paths.eval_dir());
    fs::create_directories(paths.eval_dir() + "/curves");
    fs::create_directories(paths.eval_dir() + "/plots");

    std::vector<CsvRow> report_data;
    report_data.push_back({"model", "target", "auc", "auprc", "f1", "tpr", "tnr", "acc"});

    // --- patient-level fusion models, both targets
    for (FusionTarget target : {FusionTarget::lesion, FusionTarget::malignancy}) {
        std::string tname = to_string(target);
        auto label_of = [&](const CaseRecord* c) {
            return target == FusionTarget::lesion ? (c->labels.has_lesion ? 1 : 0)
                                                  : (c->labels.is_malignant ? 1 : 0);
        };

        struct NamedModel {
            std::string name;
            std::function<double(const CaseRecord*)> score;
        };
        std::vector<NamedModel> models;

        auto add_score_head = [&](const std::string& file, const std::string& display) {
            std::string path = paths.fusion_head(file);
            if (!fs::exists(path)) {
                throw MissingArtifactError("missing fusion head: " + path + " (run train fusion)");
            }
            auto head = std::make_shared<ScoreFusionHead>(ScoreFusionHead::from_checkpoint(Checkpoint::load(path)));
            models.push_back({display, [head, target](const CaseRecord* c) {
                                  FusionConfig fc{head->layout.n, target, head->layout.density_slot};
                                  return head->predict(build_score_vector(c->fusion_inputs(), fc));
                              }});
        };
        auto add_feature_head = [&](const std::string& file, const std::string& display) {
            std::string path = paths.fusion_head(file);
            if (!fs::exists(path)) {
                throw MissingArtifactError("missing fusion head: " + path + " (run train fusion)");
            }
            Checkpoint ckpt = Checkpoint::load(path);
            auto net = std::make_shared<EmbeddingNet>(EmbeddingNet::from_checkpoint(ckpt));
            auto norm = std::make_shared<Normalizer>(Normalizer::unpack(ckpt.get("normalizer")));
            int fw = cache.feature_width;
            models.push_back({display, [net, norm, target, fw](const CaseRecord* c) {
                                  FusionConfig fc{net->config().n, target, net->config().include_density};
                                  FeatureBundle b = build_feature_bundle(c->fusion_inputs(), fc, fw);
                                  FeatureBundle nb = FeatureBundle::unflatten(norm->apply(b.flatten()),
                                                                              b.layout, fw);
                                  return net->predict(nb);
                              }});
        };

        add_score_head(fusion_head_name(ScoreHeadKind::mlp, target, true), "P_score");
        if (cfg.fusion_density_ablation) {
            add_score_head(fusion_head_name(ScoreHeadKind::mlp, target, false), "P_score_star");
        }
        add_feature_head(feature_head_name(target, true), "P_feat");
        if (cfg.fusion_density_ablation) {
            add_feature_head(feature_head_name(target, false), "P_feat_star");
        }
        models.push_back({"max_pF", [](const CaseRecord* c) {
                              return ensemble_max(c->fusion_inputs(), FusionTarget::lesion);
                          }});
        models.push_back({"max_pL", [](const CaseRecord* c) {
                              return ensemble_max(c->fusion_inputs(), FusionTarget::malignancy);
                          }});

        std::vector<ModelPredictions> preds;
        for (const auto& m : models) {
            ModelPredictions mp;
            mp.name = m.name;
            for (const CaseRecord* c : test_cases) {
                mp.samples.push_back({c->case_id, m.score(c), label_of(c)});
            }
            preds.push_back(std::move(mp));
        }
        MetricsReport report = build_report(preds, 0.5);

        // predictions CSV
        {
            std::vector<CsvRow> rows;
            CsvRow header = {"case_id", "label"};
            for (const auto& m : models) header.push_back(m.name);
            rows.push_back(header);
            for (std::size_t i = 0; i < test_cases.size(); ++i) {
                CsvRow row = {test_cases[i]->case_id, std::to_string(label_of(test_cases[i]))};
                for (const auto& p : preds) row.push_back(format_double(p.samples[i].score));
                rows.push_back(row);
            }
            write_csv(paths.eval_dir() + "/predictions_" + tname + ".csv", rows);
        }
        // p-value matrix CSV
        {
            std::vector<CsvRow> rows;
            CsvRow header = {"model"};
            for (const auto& m : models) header.push_back(m.name);
            rows.push_back(header);
            for (std::size_t i = 0; i < models.size(); ++i) {
                CsvRow row = {models[i].name};
                for (std::size_t j = 0; j < models.size(); ++j) {
                    row.push_back(i == j ? "inf" : format_double(report.p_values[i][j].p_value));
                }
                rows.push_back(row);
            }
            write_csv(paths.eval_dir() + "/pvalues_" + tname + ".csv", rows);
        }
        // curves and summary rows
        for (const auto& entry : report.entries) {
            write_curve_csv(paths.eval_dir() + "/curves/roc_" + tname + "_" + entry.model + ".csv",
                            entry.roc_curve);
            write_curve_csv(paths.eval_dir() + "/curves/pr_" + tname + "_" + entry.model + ".csv",
                            entry.pr_curve);
            report_data.push_back({entry.model, tname, format_double(entry.auc),
                                   format_double(entry.auprc_value), format_double(entry.f1),
                                   format_double(entry.tpr), format_double(entry.tnr),
                                   format_double(entry.accuracy)});
        }

        // Score-head comparison (MLP vs SVM vs random forest).
        {
            std::vector<CsvRow> rows;
            rows.push_back({"head", "target", "auc", "f1", "tpr", "tnr", "acc"});
            for (ScoreHeadKind kind :
                 {ScoreHeadKind::mlp, ScoreHeadKind::svm_rbf, ScoreHeadKind::random_forest}) {
                std::string path = paths.fusion_head(fusion_head_name(kind, target, true));
                if (!fs::exists(path)) continue;
                ScoreFusionHead head = ScoreFusionHead::from_checkpoint(Checkpoint::load(path));
                std::vector<ScoredSample> samples;
                for (const CaseRecord* c : test_cases) {
                    FusionConfig fc{head.layout.n, target, head.layout.density_slot};
                    samples.push_back(
                        {c->case_id, head.predict(build_score_vector(c->fusion_inputs(), fc)),
                         label_of(c)});
                }
                RocResult roc = roc_auc(samples);
                ClassificationMetrics cm = classification_metrics(samples, 0.5);
                rows.push_back({to_string(kind), tname, format_double(roc.auc), format_double(cm.f1),
                                format_double(cm.tpr), format_double(cm.tnr),
                                format_double(cm.accuracy)});
            }
            write_csv(paths.eval_dir() + "/score_heads_" + tname + ".csv", rows);
        }
    }

    // --- breast density section
    std::string density_section = "# breast density\n";
    {
        std::vector<ModelPredictions> preds(2);
        preds[0].name = "D";
        preds[1].name = "mean_Dv";
        for (const CaseRecord* c : test_cases) {
            int label = c->labels.density_super == DensitySuper::dense ? 1 : 0;
            double mean_view = 0.0;
            for (int v = 0; v < kNumViews; ++v) mean_view += c->views[v].p_density_view;
            mean_view /= kNumViews;
            preds[0].samples.push_back({c->case_id, c->p_density, label});
            preds[1].samples.push_back({c->case_id, mean_view, label});
        }
        MetricsReport dens = build_report(preds, 0.5);
        std::vector<std::string> names = {"D", "mean_Dv"};
        for (std::size_t i = 0; i < dens.entries.size(); ++i) {
            append_report_line(density_section, names[i], "density", dens.entries[i], names,
                               dens.p_values[i]);
            write_curve_csv(paths.eval_dir() + "/curves/roc_density_" + names[i] + ".csv",
                            dens.entries[i].roc_curve);
        }
        std::vector<CsvRow> rows;
        rows.push_back({"model", "threshold", "tpr", "f1", "tnr", "acc"});
        for (double t : cfg.density_thresholds) {
            for (std::size_t i = 0; i < preds.size(); ++i) {
                ClassificationMetrics cm = classification_metrics(preds[i].samples, t);
                rows.push_back({names[i], format_double(t), metric_or_na(cm.tpr, cm.tpr_defined),
                                format_double(cm.f1), metric_or_na(cm.tnr, cm.tnr_defined),
                                format_double(cm.accuracy)});
                density_section += "density_threshold model=" + names[i] + " threshold=" + format_double(t) +
                                   " tpr=" + format_double(cm.tpr) + " f1=" + format_double(cm.f1) +
                                   " tnr=" + format_double(cm.tnr) + " acc=" + format_double(cm.accuracy) +
                                   "\n";
            }
        }
        write_csv(paths.eval_dir() + "/density_thresholds.csv", rows);
    }
    write_text_file(paths.eval_dir() + "/density_section.txt", density_section);

    // --- findings section (image level)
    std::string findings_section = "# findings (image level)\n";
    {
        std::vector<ModelPredictions> preds;
        ModelPredictions f;
        f.name = "F";
        for (const CaseRecord* c : test_cases) {
            for (int v = 0; v < kNumViews; ++v) {
                f.samples.push_back({c->case_id + "/" + std::to_string(v), c->views[v].p_findings,
                                     c->views[v].has_lesion});
            }
        }
        preds.push_back(std::move(f));
        if (cache.has_nopre) {
            ModelPredictions g;
            g.name = "F_nopre";
            for (const CaseRecord* c : test_cases) {
                for (int v = 0; v < kNumViews; ++v) {
                    g.samples.push_back({c->case_id + "/" + std::to_string(v),
                                         c->views[v].p_findings_nopre, c->views[v].has_lesion});
                }
            }
            preds.push_back(std::move(g));
        }
        MetricsReport rep = build_report(preds, 0.5);
        std::vector<std::string> names;
        for (const auto& p : preds) names.push_back(p.name);
        for (std::size_t i = 0; i < rep.entries.size(); ++i) {
            append_report_line(findings_section, names[i], "findings", rep.entries[i], names,
                               rep.p_values[i]);
            write_curve_csv(paths.eval_dir() + "/curves/roc_findings_" + names[i] + ".csv",
                            rep.entries[i].roc_curve);
        }
    }
    write_text_file(paths.eval_dir() + "/findings_section.txt", findings_section);

    // --- localization FROC section
    std::string froc_section = "# lesion localization\n";
    {
        std::vector<FrocImage> images;
        for (const CaseRecord* c : test_cases) {
            for (int v = 0; v < kNumViews; ++v) {
                FrocImage img;
                img.detections = c->views[v].detections;
                img.ground_truths = c->views[v].ground_truths;
                images.push_back(std::move(img));
            }
        }
        std::vector<CsvRow> rows;
        rows.push_back({"class", "tpr_at_fpi_0.5", "tpr_at_fpi_1", "tpr_at_fpi_2", "lesions"});
        for (int cls = 0; cls < kNumLesionClasses; ++cls) {
            auto lc = static_cast<LesionClass>(cls);
            int total = 0;
            for (const auto& img : images) {
                for (const auto& g : img.ground_truths) total += g.cls == lc;
            }
            if (total == 0) {
                froc_section += "froc class=" + to_string(lc) + " lesions=0 skipped=1\n";
                continue;
            }
            FrocResult fr = froc(images, lc);
            write_curve_csv(paths.eval_dir() + "/curves/froc_" + to_string(lc) + ".csv", fr.curve);
            rows.push_back({to_string(lc), format_double(fr.tpr_at_fpi(0.5)),
                            format_double(fr.tpr_at_fpi(1.0)), format_double(fr.tpr_at_fpi(2.0)),
                            std::to_string(fr.total_lesions)});
            froc_section += "froc class=" + to_string(lc) +
                            " tpr_at_fpi_0.5=" + format_double(fr.tpr_at_fpi(0.5)) +
                            " tpr_at_fpi_1=" + format_double(fr.tpr_at_fpi(1.0)) +
                            " tpr_at_fpi_2=" + format_double(fr.tpr_at_fpi(2.0)) +
                            " lesions=" + std::to_string(fr.total_lesions) + "\n";
        }
        write_csv(paths.eval_dir() + "/froc_points.csv", rows);
        for (const auto& ref : kFullScaleFrocReferences) {
            froc_section += "froc_reference scale=full class=" + to_string(ref.cls) +
                            " tpr=" + format_double(ref.tpr) + " fpi=" + format_double(ref.fpi) + "\n";
        }
    }
    write_text_file(paths.eval_dir() + "/froc_section.txt", froc_section);

    write_csv(paths.eval_dir() + "/report_data.csv", report_data);
    render_report_from_artifacts(paths);
}

void cmd_report(const PipelineConfig& cfg) {
    PipelinePaths paths{cfg.out_dir};
    fs::create_directories(paths.out);
    DirectoryLock lock(paths.lock(), cfg.force);
    render_report_from_artifacts(paths);
}

void run_stage(const PipelineConfig& cfg, const std::string& stage) {
    if (stage == "generate") cmd_generate(cfg);
    else if (stage == "split") cmd_split(cfg);
    else if (stage.rfind("train:", 0) == 0) cmd_train(cfg, stage.substr(6));
    else if (stage == "extract") cmd_extract(cfg);
    else if (stage == "evaluate") cmd_evaluate(cfg);
    else if (stage == "report") cmd_report(cfg);
    else throw ConfigError("unknown stage '" + stage + "'");
}

}  // namespace mf
