#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "core/types.hpp"

namespace mf {

struct ScoredSample {
    std::string id;
    double score = 0.0;
    int label = 0;  // 0 or 1
};

struct CurvePoint {
    double x = 0.0;
    double y = 0.0;
    double threshold = 0.0;
};

using Curve = std::vector<CurvePoint>;

struct ClassificationMetrics {
    long long tp = 0, fp = 0, tn = 0, fn = 0;
    double tpr = 0.0, tnr = 0.0, accuracy = 0.0, f1 = 0.0, precision = 0.0;
    bool tpr_defined = true, tnr_defined = true, precision_defined = true;
};

ClassificationMetrics classification_metrics(const std::vector<ScoredSample>& samples, double threshold);

struct RocResult {
    double auc = 0.0;
    Curve curve;  // x = FPR, y = TPR
};

// AUC via the Mann-Whitney pair statistic (ties count one half); the returned
// curve integrates to the same value by trapezoid.
RocResult roc_auc(const std::vector<ScoredSample>& samples);

struct PrResult {
    double auprc = 0.0;
    Curve curve;  // x = recall, y = precision
};

// Step-interpolated precision-recall area (precision held between recall steps).
PrResult auprc(const std::vector<ScoredSample>& samples);

struct GroundTruthBox {
    BBox box;
    LesionClass cls = LesionClass::benign_calcification;
};

struct MatchResult {
    std::vector<bool> detection_is_tp;          // per detection
    std::vector<int> detection_matched_gt;      // index or -1
    std::vector<bool> ground_truth_detected;    // per ground truth
    std::vector<int> ground_truth_matched_det;  // index or -1
};

// A detection matches a ground truth when IoU >= iou_threshold OR the
// detection box centre lies inside the ground-truth box. Assignment is greedy
// in descending confidence; each ground truth is consumed at most once.
// Class labels must agree only when class_sensitive is set.
MatchResult match_detections(const std::vector<Detection>& detections,
                             const std::vector<GroundTruthBox>& ground_truths,
                             double iou_threshold = 0.2, bool class_sensitive = false);

struct FrocImage {
    std::vector<Detection> detections;
    std::vector<GroundTruthBox> ground_truths;
};

struct FrocResult {
    Curve curve;  // x = FPI, y = TPR, threshold = score
    int total_lesions = 0;
    int total_images = 0;

    double tpr_at_fpi(double fpi) const;
};

// Free-response ROC over a set of images. When class_filter is set, only that
// class's detections and ground truths enter the evaluation (class-sensitive
// matching); otherwise localization credit ignores the class.
FrocResult froc(const std::vector<FrocImage>& images, std::optional<LesionClass> class_filter,
                double iou_threshold = 0.2);

struct WilcoxonResult {
    double statistic = 0.0;  // W+ (sum of ranks of positive differences)
    double p_value = 1.0;
    int n_effective = 0;
    bool degenerate = false;  // all differences zero
    bool significant = false; // at alpha = 0.05
    bool exact = false;       // exact distribution used (n_effective <= 25)
};

// Two-sided Wilcoxon signed-rank test on paired samples. Zero differences are
// dropped, tied magnitudes receive average ranks; the exact distribution is
// enumerated for n_effective <= 25 and a tie- and continuity-corrected normal
// approximation is used above that.
WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& paired_a,
                                    const std::vector<double>& paired_b);

struct ModelPredictions {
    std::string name;
    std::vector<ScoredSample> samples;  // ids shared across models
};

struct ReportEntry {
    std::string model;
    double auc = 0.0, auprc_value = 0.0, f1 = 0.0, tpr = 0.0, tnr = 0.0, accuracy = 0.0;
    Curve roc_curve;
    Curve pr_curve;
};

struct MetricsReport {
    std::vector<ReportEntry> entries;
    // p_values[i][j] for model i vs model j; diagonal entries are degenerate.
    std::vector<std::vector<WilcoxonResult>> p_values;
};

// Scalar metrics, curves, and the pairwise signed-rank matrix for a family of
// models evaluated on one shared sample set (aligned by sample id).
MetricsReport build_report(const std::vector<ModelPredictions>& models, double threshold = 0.5);

}  // namespace mf
