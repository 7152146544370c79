#pragma once

#include <array>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "core/checkpoint.hpp"
#include "core/forest.hpp"
#include "core/nn.hpp"
#include "core/svm.hpp"
#include "core/types.hpp"

namespace mf {

enum class FusionTarget { lesion, malignancy };

inline std::string to_string(FusionTarget t) {
    return t == FusionTarget::lesion ? "lesion" : "malignancy";
}

struct FusionConfig {
    int n = 1;  // detections considered per view, in {1..5}
    FusionTarget target = FusionTarget::lesion;
    bool include_density = true;

    void validate() const;
};

// Slot layout shared by score vectors and feature bundles:
//   [density (optional)] [4 findings slots] [4*n localizer slots],
// views in (L-CC, L-MLO, R-CC, R-MLO) order, detections confidence-descending
// within a view, absent detections padding the trailing slots.
struct FusionLayout {
    bool density_slot = true;
    int n = 1;

    int score_size() const { return (density_slot ? 1 : 0) + kNumViews + kNumViews * n; }
    std::string describe(FusionTarget target) const;
};

// Per-case task-model outputs consumed by the fusion stage. Detections must
// already be sorted by the detector's ordering contract.
struct FusionInputs {
    std::optional<double> p_density;
    std::array<double, kNumViews> p_findings{};
    std::array<std::vector<Detection>, kNumViews> detections;

    std::optional<std::vector<double>> density_feature;              // 4 * feature_width
    std::array<std::vector<double>, kNumViews> findings_features;    // feature_width each
    std::array<std::vector<double>, kNumViews> background_features;  // feature_width each
};

// Detections that survive the target's class filter, top-n per view.
std::vector<const Detection*> retained_detections(const std::vector<Detection>& detections,
                                                  const FusionConfig& cfg);

struct FusionVector {
    std::vector<double> values;
    FusionLayout layout;
};

FusionVector build_score_vector(const FusionInputs& inputs, const FusionConfig& cfg);

struct FeatureBundle {
    FusionLayout layout;
    int feature_width = 0;
    std::optional<std::vector<double>> density_branch;            // 4 * feature_width
    std::array<std::vector<double>, kNumViews> findings_branches; // feature_width each
    std::vector<std::vector<double>> localizer_branches;          // 4*n slots of feature_width
    std::vector<bool> presence;                                   // per localizer slot

    std::vector<double> flatten() const;
    static FeatureBundle unflatten(const std::vector<double>& flat, const FusionLayout& layout,
                                   int feature_width);
};

FeatureBundle build_feature_bundle(const FusionInputs& inputs, const FusionConfig& cfg,
                                   int feature_width);

// Per-dimension min-max map onto [-1, 1]; degenerate dimensions map to 0 and
// out-of-range values clamp at application time.
class Normalizer {
public:
    static Normalizer fit(const std::vector<std::vector<double>>& training_vectors);
    std::vector<double> apply(const std::vector<double>& v) const;

    std::size_t dimensions() const { return min_.size(); }
    std::vector<double> pack() const;
    static Normalizer unpack(const std::vector<double>& blob);

private:
    std::vector<double> min_, max_;
};

// ---------------------------------------------------------------------------
// Score-fusion heads

enum class ScoreHeadKind { mlp, svm_rbf, random_forest };

inline std::string to_string(ScoreHeadKind k) {
    switch (k) {
        case ScoreHeadKind::mlp: return "mlp";
        case ScoreHeadKind::svm_rbf: return "svm_rbf";
        default: return "random_forest";
    }
}

class ScoreFusionHead {
public:
    ScoreHeadKind kind = ScoreHeadKind::mlp;
    FusionLayout layout;
    FusionTarget target = FusionTarget::lesion;
    std::string grid_choice;  // human-readable selected grid point

    double predict(const FusionVector& w) const;

    Checkpoint to_checkpoint() const;
    static ScoreFusionHead from_checkpoint(const Checkpoint& ckpt);

    // Internals, exposed for construction by the trainer.
    std::shared_ptr<nn::Sequential> mlp;
    std::vector<int> mlp_hidden;
    int input_dim = 0;
    SvmRbf svm;
    RandomForest forest;
};

struct GridPointLog {
    std::string description;
    double validation_auc = 0.0;
};

struct ScoreFusionTraining {
    ScoreFusionHead head;
    std::vector<GridPointLog> grid_log;  // one entry per trained candidate
};

// Grid search over the head's hyper-parameters, selecting the candidate with
// the highest validation AUC (first grid point wins ties).
ScoreFusionTraining train_score_fusion(const std::vector<FusionVector>& train_vectors,
                                       const std::vector<int>& train_labels,
                                       const std::vector<FusionVector>& val_vectors,
                                       const std::vector<int>& val_labels, ScoreHeadKind kind,
                                       std::uint64_t seed);

// ---------------------------------------------------------------------------
// Feature-fusion embedding network

struct EmbeddingNetConfig {
    int feature_width = 64;
    int n = 1;
    bool include_density = true;
    int branch_channels = 16;
    int head_hidden = 64;
    double head_dropout = 0.1;
};

// Multi-branch network over normalized feature bundles: two conv+pool blocks
// for the density and findings branches, three for the localizer branch, ReLU
// around the concatenation, then dense -> dropout -> dense -> softmax.
class EmbeddingNet {
public:
    EmbeddingNet(const EmbeddingNetConfig& cfg, std::uint64_t seed);

    nn::Tensor forward(const std::vector<const FeatureBundle*>& batch, bool train, Rng& rng);
    void backward(const nn::Tensor& dlogits);
    std::vector<nn::ParamRef> params();

    double predict(const FeatureBundle& normalized_bundle);

    const EmbeddingNetConfig& config() const { return cfg_; }

    Checkpoint to_checkpoint() const;
    static EmbeddingNet from_checkpoint(const Checkpoint& ckpt);

private:
    nn::Tensor branch_input(const std::vector<const FeatureBundle*>& batch, int which) const;

    EmbeddingNetConfig cfg_;
    nn::Sequential density_branch_;
    nn::Sequential findings_branch_;
    nn::Sequential localizer_branch_;
    nn::ReLU concat_relu_;
    nn::Sequential head_;
    std::array<int, 3> branch_flat_{};  // flattened width per branch
};

struct FeatureFusionTraining {
    std::shared_ptr<EmbeddingNet> net;
    nn::TrainLog log;
    double validation_auc = 0.0;
};

FeatureFusionTraining train_feature_fusion(const std::vector<FeatureBundle>& train_bundles,
                                           const std::vector<int>& train_labels,
                                           const std::vector<FeatureBundle>& val_bundles,
                                           const std::vector<int>& val_labels,
                                           const EmbeddingNetConfig& net_cfg,
                                           const nn::TrainConfig& train_cfg);

// ---------------------------------------------------------------------------
// Baselines

// lesion: max findings score across views; malignancy: max malignant-class
// detection confidence across views, 0 when there is none.
double ensemble_max(const FusionInputs& inputs, FusionTarget target);

}  // namespace mf
