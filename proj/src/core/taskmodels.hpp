#pragma once

#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "core/checkpoint.hpp"
#include "core/nn.hpp"
#include "core/preprocess.hpp"
#include "core/types.hpp"

namespace mf {

// ---------------------------------------------------------------------------
// Shared backbone: stem conv (stride 2) followed by depthwise-separable
// stages (stride 2 each) and a final pointwise projection to feature_width.
// forward_features appends global average pooling.

struct BackboneConfig {
    int stem_channels = 16;
    std::vector<int> stage_channels = {32, 64};
    int feature_width = 64;
    PreprocessProfile input_profile;

    int stride() const { return 1 << (1 + static_cast<int>(stage_channels.size())); }
};

class Backbone {
public:
    Backbone(const BackboneConfig& cfg, Rng init_rng);

    nn::Tensor forward_map(const nn::Tensor& x, bool train, Rng& rng);   // (N, fw, h', w')
    nn::Tensor backward_map(const nn::Tensor& dmap);
    nn::Tensor forward_features(const nn::Tensor& x, bool train, Rng& rng);  // (N, fw)
    nn::Tensor backward_features(const nn::Tensor& dfeat);

    void collect_params(const std::string& prefix, std::vector<nn::ParamRef>& out);
    const BackboneConfig& config() const { return cfg_; }

private:
    BackboneConfig cfg_;
    nn::Sequential trunk_;
    nn::GlobalAvgPool2D gap_;
};

// Batch of prepared images -> (N, 1, H, W), scaled by `scale`.
nn::Tensor batch_tensor(const std::vector<const Image*>& images, double scale);

// ---------------------------------------------------------------------------
// Density models

class DensityViewModel {
public:
    DensityViewModel(const BackboneConfig& cfg, std::uint64_t seed);

    struct Output {
        nn::Tensor logits;    // (N, 2); class 1 = dense
        nn::Tensor features;  // (N, feature_width)
    };
    Output forward(const nn::Tensor& x, bool train, Rng& rng);
    void backward(const nn::Tensor& dlogits);
    std::vector<nn::ParamRef> params();

    Backbone backbone;
    nn::Dropout dropout;
    nn::Dense head;

    Checkpoint to_checkpoint() const;
    static DensityViewModel from_checkpoint(const Checkpoint& ckpt);
};

class DensityPatientModel {
public:
    DensityPatientModel(const BackboneConfig& cfg, std::uint64_t seed);

    // One branch per view in (L-CC, L-MLO, R-CC, R-MLO) order.
    struct Output {
        nn::Tensor logits;    // (N, 2)
        nn::Tensor features;  // (N, 4 * feature_width), pre-head concatenation
    };
    Output forward(const std::array<nn::Tensor, kNumViews>& views, bool train, Rng& rng);
    void backward(const nn::Tensor& dlogits);
    std::vector<nn::ParamRef> params();

    // Copies view-model backbone weights into every branch.
    void init_branches_from(const DensityViewModel& view_model);

    std::array<std::unique_ptr<Backbone>, kNumViews> branches;
    std::array<std::unique_ptr<nn::Dropout>, kNumViews> branch_dropout;
    nn::Dense head;
    BackboneConfig branch_config;

    Checkpoint to_checkpoint() const;
    static DensityPatientModel from_checkpoint(const Checkpoint& ckpt);
};

// ---------------------------------------------------------------------------
// Patch classifier and findings model

class PatchClassifier {
public:
    PatchClassifier(const BackboneConfig& cfg, std::uint64_t seed);

    nn::Tensor forward(const nn::Tensor& x, bool train, Rng& rng);  // logits (N, 2)
    void backward(const nn::Tensor& dlogits);
    std::vector<nn::ParamRef> params();

    Backbone backbone;
    nn::Dense head;

    Checkpoint to_checkpoint() const;
    static PatchClassifier from_checkpoint(const Checkpoint& ckpt);
};

class FindingsModel {
public:
    FindingsModel(const BackboneConfig& cfg, std::uint64_t seed);

    struct Output {
        nn::Tensor logits;    // (N, 2); class 1 = has findings
        nn::Tensor features;  // (N, feature_width), taken at global average pooling
    };
    Output forward(const nn::Tensor& x, bool train, Rng& rng);
    void backward(const nn::Tensor& dlogits);
    std::vector<nn::ParamRef> params();

    // Initializes the feature extractor from patch-classifier weights.
    void init_backbone_from(const PatchClassifier& patch_model);

    Backbone backbone;
    nn::Dense hidden;
    nn::ReLU hidden_relu;
    nn::Dropout dropout;
    nn::Dense head;

    Checkpoint to_checkpoint() const;
    static FindingsModel from_checkpoint(const Checkpoint& ckpt);
};

// ---------------------------------------------------------------------------
// Localizer: single-stage anchor detector over the backbone feature map with
// class-level NMS and per-detection pooled features.

struct AnchorLayout {
    std::vector<double> scales = {12.0, 24.0, 48.0};
    std::vector<double> aspect_ratios = {1.0, 1.6};  // height / width

    int per_cell() const { return static_cast<int>(scales.size() * aspect_ratios.size()); }
};

struct LocalizerConfig {
    BackboneConfig backbone;
    AnchorLayout anchors;
    double score_threshold = 0.05;
    double nms_iou = 0.5;
    int max_detections = 16;
};

struct DetectionSet {
    std::vector<Detection> detections;          // sorted per the tie-break contract
    std::vector<double> background_feature;     // whole-map pooled feature
};

class Localizer {
public:
    Localizer(const LocalizerConfig& cfg, std::uint64_t seed);

    DetectionSet detect(const Image& prepared, int max_detections) const;
    DetectionSet detect(const Image& prepared) const { return detect(prepared, cfg_.max_detections); }

    const LocalizerConfig& config() const { return cfg_; }
    std::vector<nn::ParamRef> params();

    Checkpoint to_checkpoint() const;
    static Localizer from_checkpoint(const Checkpoint& ckpt);

    struct TrainSample {
        Image image;  // prepared at the localization profile
        std::vector<BBox> boxes;
        std::vector<LesionClass> classes;
    };

    struct TrainStats {
        std::vector<double> loss_per_log_interval;
        int iterations = 0;
    };

    TrainStats train(const std::vector<TrainSample>& samples, const nn::TrainConfig& cfg,
                     double box_jitter_ratio);

    // Exposed for tests: anchors in input-pixel space, forward pass pieces.
    std::vector<BBox> anchor_boxes(int map_h, int map_w) const;

private:
    friend class LocalizerGradientProbe;
    LocalizerConfig cfg_;
    mutable Backbone trunk_;
    mutable nn::Conv2D cls_head_;
    mutable nn::Conv2D box_head_;
};

// Greedy class-level non-maximum suppression; input must be sorted by the
// detection ordering contract. Idempotent.
std::vector<Detection> nms_per_class(std::vector<Detection> detections, double iou_threshold);

// Sorts by confidence descending, breaking ties by larger area then (x_min, y_min).
void sort_detections(std::vector<Detection>& detections);

// ---------------------------------------------------------------------------
// Training entry points

struct LabeledImageSet {
    std::vector<Image> images;   // prepared views
    std::vector<int> labels;
};

struct TrainedModelLog {
    nn::TrainLog log;
};

nn::TrainLog train_density_view(DensityViewModel& model, const LabeledImageSet& train,
                                const LabeledImageSet& val, const nn::TrainConfig& cfg,
                                const AugmentationPolicy& augmentation);

struct PatientDensitySet {
    // images[i] holds the four prepared views of case i in canonical order.
    std::vector<std::array<Image, kNumViews>> cases;
    std::vector<int> labels;
};

nn::TrainLog train_density_patient(DensityPatientModel& model, const PatientDensitySet& train,
                                   const PatientDensitySet& val, const nn::TrainConfig& cfg,
                                   const AugmentationPolicy& augmentation);

nn::TrainLog train_patch_classifier(PatchClassifier& model, const LabeledImageSet& train,
                                    const LabeledImageSet& val, const nn::TrainConfig& cfg,
                                    const AugmentationPolicy& augmentation);

nn::TrainLog train_findings(FindingsModel& model, const LabeledImageSet& train,
                            const LabeledImageSet& val, const nn::TrainConfig& cfg,
                            const AugmentationPolicy& augmentation);

// Inference helpers (single exam / image; eval mode).
struct DensityPrediction {
    double p_dense = 0.0;
    std::vector<double> feature;  // 4 * feature_width
};

DensityPrediction predict_density(DensityPatientModel& model,
                                  const std::array<Image, kNumViews>& prepared_views);

double predict_density_view(DensityViewModel& model, const Image& prepared_view);

struct FindingsPrediction {
    double p_findings = 0.0;
    std::vector<double> feature;  // feature_width
};

FindingsPrediction predict_findings(FindingsModel& model, const Image& prepared_view);

}  // namespace mf
