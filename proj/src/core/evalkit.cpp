#include "core/evalkit.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <set>

#include "core/errors.hpp"

namespace mf {

ClassificationMetrics classification_metrics(const std::vector<ScoredSample>& samples,
                                             double threshold) {
    if (samples.empty()) throw DataError("classification_metrics: empty input");
    ClassificationMetrics m;
    for (const auto& s : samples) {
        bool predicted = s.score >= threshold;
        if (s.label == 1) {
            if (predicted) m.tp += 1;
            else m.fn += 1;
        } else {
            if (predicted) m.fp += 1;
            else m.tn += 1;
        }
    }
    long long pos = m.tp + m.fn, neg = m.fp + m.tn;
    m.tpr_defined = pos > 0;
    m.tnr_defined = neg > 0;
    m.precision_defined = (m.tp + m.fp) > 0;
    m.tpr = m.tpr_defined ? static_cast<double>(m.tp) / pos : 0.0;
    m.tnr = m.tnr_defined ? static_cast<double>(m.tn) / neg : 0.0;
    m.precision = m.precision_defined ? static_cast<double>(m.tp) / (m.tp + m.fp) : 0.0;
    m.accuracy = static_cast<double>(m.tp + m.tn) / static_cast<double>(samples.size());
    double pr_sum = m.precision + m.tpr;
    m.f1 = pr_sum > 0.0 ? 2.0 * m.precision * m.tpr / pr_sum : 0.0;
    return m;
}

RocResult roc_auc(const std::vector<ScoredSample>& samples) {
    long long pos = 0, neg = 0;
    for (const auto& s : samples) (s.label == 1 ? pos : neg) += 1;
    if (pos == 0 || neg == 0) throw DataError("AUC undefined: only one class present");

    std::vector<const ScoredSample*> sorted;
    sorted.reserve(samples.size());
    for (const auto& s : samples) sorted.push_back(&s);
    std::sort(sorted.begin(), sorted.end(),
              [](const ScoredSample* a, const ScoredSample* b) { return a->score > b->score; });

    RocResult out;
    out.curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    long long tp = 0, fp = 0;
    // Mann-Whitney statistic accumulated per tie group: positives in the
    // group beat every lower-scored negative and tie within the group.
    double pair_wins = 0.0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        std::size_t j = i;
        long long gpos = 0, gneg = 0;
        while (j < sorted.size() && sorted[j]->score == sorted[i]->score) {
            (sorted[j]->label == 1 ? gpos : gneg) += 1;
            ++j;
        }
        pair_wins += static_cast<double>(gpos) * static_cast<double>(neg - fp - gneg) +
                     0.5 * static_cast<double>(gpos) * static_cast<double>(gneg);
        tp += gpos;
        fp += gneg;
        out.curve.push_back({static_cast<double>(fp) / neg, static_cast<double>(tp) / pos,
                             sorted[i]->score});
        i = j;
    }
    if (out.curve.back().x != 1.0 || out.curve.back().y != 1.0) {
        out.curve.push_back({1.0, 1.0, -std::numeric_limits<double>::infinity()});
    }
    out.auc = pair_wins / (static_cast<double>(pos) * static_cast<double>(neg));
    return out;
}

PrResult auprc(const std::vector<ScoredSample>& samples) {
    long long pos = 0;
    for (const auto& s : samples) pos += (s.label == 1);
    if (pos == 0) throw DataError("AUPRC undefined: no positive samples");

    std::vector<const ScoredSample*> sorted;
    sorted.reserve(samples.size());
    for (const auto& s : samples) sorted.push_back(&s);
    std::sort(sorted.begin(), sorted.end(),
              [](const ScoredSample* a, const ScoredSample* b) { return a->score > b->score; });

    PrResult out;
    long long tp = 0, fp = 0;
    double prev_recall = 0.0;
    std::size_t i = 0;
    while (i < sorted.size()) {
        std::size_t j = i;
        while (j < sorted.size() && sorted[j]->score == sorted[i]->score) {
            (sorted[j]->label == 1 ? tp : fp) += 1;
            ++j;
        }
        double recall = static_cast<double>(tp) / pos;
        double precision = static_cast<double>(tp) / static_cast<double>(tp + fp);
        out.auprc += (recall - prev_recall) * precision;
        out.curve.push_back({recall, precision, sorted[i]->score});
        prev_recall = recall;
        i = j;
    }
    return out;
}

MatchResult match_detections(const std::vector<Detection>& detections,
                             const std::vector<GroundTruthBox>& ground_truths,
                             double iou_threshold, bool class_sensitive) {
    MatchResult m;
    m.detection_is_tp.assign(detections.size(), false);
    m.detection_matched_gt.assign(detections.size(), -1);
    m.ground_truth_detected.assign(ground_truths.size(), false);
    m.ground_truth_matched_det.assign(ground_truths.size(), -1);

    std::vector<std::size_t> order(detections.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return detections[a].confidence > detections[b].confidence;
    });

    for (std::size_t d : order) {
        const Detection& det = detections[d];
        int best_gt = -1;
        double best_iou = -1.0;
        for (std::size_t g = 0; g < ground_truths.size(); ++g) {
            if (m.ground_truth_detected[g]) continue;
            if (class_sensitive && ground_truths[g].cls != det.cls) continue;
            double overlap = iou(det.box, ground_truths[g].box);
            bool center_hit = ground_truths[g].box.contains_point(det.box.center_x(), det.box.center_y());
            if (overlap >= iou_threshold || center_hit) {
                if (overlap > best_iou) {
                    best_iou = overlap;
                    best_gt = static_cast<int>(g);
                }
            }
        }
        if (best_gt >= 0) {
            m.detection_is_tp[d] = true;
            m.detection_matched_gt[d] = best_gt;
            m.ground_truth_detected[best_gt] = true;
            m.ground_truth_matched_det[best_gt] = static_cast<int>(d);
        }
    }
    return m;
}

double FrocResult::tpr_at_fpi(double fpi) const {
    if (curve.empty()) return 0.0;
    // Curve is ordered by ascending FPI, starting at the implicit (0, ...) anchor.
    if (fpi <= curve.front().x) {
        return fpi < curve.front().x ? 0.0 : curve.front().y;
    }
    for (std::size_t i = 1; i < curve.size(); ++i) {
        if (fpi <= curve[i].x) {
            double x0 = curve[i - 1].x, y0 = curve[i - 1].y;
            double x1 = curve[i].x, y1 = curve[i].y;
            if (x1 == x0) return std::max(y0, y1);
            return y0 + (y1 - y0) * (fpi - x0) / (x1 - x0);
        }
    }
    return curve.back().y;
}

FrocResult froc(const std::vector<FrocImage>& images, std::optional<LesionClass> class_filter,
                double iou_threshold) {
    FrocResult out;
    out.total_images = static_cast<int>(images.size());
    if (images.empty()) throw DataError("FROC: no images");

    // One greedy pass per image on the full detection list; a threshold sweep
    // is then a prefix of that assignment.
    std::vector<double> matched_gt_conf;   // confidence that detects each gt
    std::vector<double> fp_conf;           // confidences of false positives
    for (const FrocImage& img : images) {
        std::vector<Detection> dets;
        std::vector<GroundTruthBox> gts;
        for (const Detection& d : img.detections) {
            if (!class_filter || d.cls == *class_filter) dets.push_back(d);
        }
        for (const GroundTruthBox& g : img.ground_truths) {
            if (!class_filter || g.cls == *class_filter) gts.push_back(g);
        }
        out.total_lesions += static_cast<int>(gts.size());
        MatchResult m = match_detections(dets, gts, iou_threshold, class_filter.has_value());
        for (std::size_t d = 0; d < dets.size(); ++d) {
            if (m.detection_is_tp[d]) matched_gt_conf.push_back(dets[d].confidence);
            else fp_conf.push_back(dets[d].confidence);
        }
    }
    if (out.total_lesions == 0) throw DataError("FROC: no ground-truth lesions for the evaluated class");

    std::set<double, std::greater<>> thresholds;
    for (double c : matched_gt_conf) thresholds.insert(c);
    for (double c : fp_conf) thresholds.insert(c);

    std::sort(matched_gt_conf.begin(), matched_gt_conf.end(), std::greater<>());
    std::sort(fp_conf.begin(), fp_conf.end(), std::greater<>());

    auto count_ge = [](const std::vector<double>& sorted_desc, double t) {
        return std::distance(sorted_desc.begin(),
                             std::partition_point(sorted_desc.begin(), sorted_desc.end(),
                                                  [&](double x) { return x >= t; }));
    };

    out.curve.push_back({0.0, 0.0, std::numeric_limits<double>::infinity()});
    for (double t : thresholds) {
        auto tp = count_ge(matched_gt_conf, t);
        auto fp = count_ge(fp_conf, t);
        out.curve.push_back({static_cast<double>(fp) / out.total_images,
                             static_cast<double>(tp) / out.total_lesions, t});
    }
    return out;
}

namespace {

double normal_sf(double z) {
    return 0.5 * std::erfc(z / std::sqrt(2.0));
}

}  // namespace

WilcoxonResult wilcoxon_signed_rank(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw DataError("wilcoxon: paired inputs differ in length");
    if (a.size() < 5) throw DataError("wilcoxon: need at least 5 pairs");

    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = a[i] - b[i];
        if (d != 0.0) diffs.push_back(d);
    }
    WilcoxonResult res;
    res.n_effective = static_cast<int>(diffs.size());
    if (diffs.empty()) {
        res.degenerate = true;
        res.p_value = 1.0;
        return res;
    }

    // Average ranks over |d| ties.
    std::vector<std::size_t> order(diffs.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
        return std::fabs(diffs[x]) < std::fabs(diffs[y]);
    });
    std::vector<double> rank(diffs.size(), 0.0);
    std::vector<double> tie_sizes;
    std::size_t i = 0;
    while (i < order.size()) {
        std::size_t j = i;
        while (j < order.size() && std::fabs(diffs[order[j]]) == std::fabs(diffs[order[i]])) ++j;
        double avg = 0.5 * (static_cast<double>(i + 1) + static_cast<double>(j));
        for (std::size_t k = i; k < j; ++k) rank[order[k]] = avg;
        tie_sizes.push_back(static_cast<double>(j - i));
        i = j;
    }

    double w_plus = 0.0;
    for (std::size_t k = 0; k < diffs.size(); ++k) {
        if (diffs[k] > 0) w_plus += rank[k];
    }
    res.statistic = w_plus;

    int n = res.n_effective;
    if (n <= 25) {
        res.exact = true;
        // Exact null distribution of W+ over all 2^n sign assignments via a
        // subset-sum count on doubled ranks (average ranks are half-integers).
        std::vector<long long> r2(diffs.size());
        long long total2 = 0;
        for (std::size_t k = 0; k < diffs.size(); ++k) {
            r2[k] = std::llround(2.0 * rank[k]);
            total2 += r2[k];
        }
        std::vector<double> count(static_cast<std::size_t>(total2) + 1, 0.0);
        count[0] = 1.0;
        long long reach = 0;
        for (long long rv : r2) {
            reach += rv;
            for (long long s = reach; s >= rv; --s) count[s] += count[s - rv];
        }
        long long w2 = std::llround(2.0 * w_plus);
        double denom = std::ldexp(1.0, n);  // 2^n
        double le = 0.0, ge = 0.0;
        for (long long s = 0; s <= total2; ++s) {
            if (s <= w2) le += count[s];
            if (s >= w2) ge += count[s];
        }
        res.p_value = std::min(1.0, 2.0 * std::min(le, ge) / denom);
    } else {
        double mean = static_cast<double>(n) * (n + 1) / 4.0;
        double var = static_cast<double>(n) * (n + 1) * (2.0 * n + 1) / 24.0;
        for (double t : tie_sizes) var -= (t * t * t - t) / 48.0;
        double sd = std::sqrt(var);
        double num = w_plus - mean;
        double cc = num > 0 ? -0.5 : (num < 0 ? 0.5 : 0.0);  // continuity correction
        double z = sd > 0 ? (num + cc) / sd : 0.0;
        res.p_value = std::min(1.0, 2.0 * normal_sf(std::fabs(z)));
    }
    res.significant = res.p_value < 0.05;
    return res;
}

MetricsReport build_report(const std::vector<ModelPredictions>& models, double threshold) {
    MetricsReport report;
    if (models.empty()) throw DataError("build_report: no models");

    // All sets must share the same sample ids.
    std::vector<std::string> base_ids;
    for (const auto& s : models[0].samples) base_ids.push_back(s.id);
    std::sort(base_ids.begin(), base_ids.end());
    for (const auto& m : models) {
        std::vector<std::string> ids;
        for (const auto& s : m.samples) ids.push_back(s.id);
        std::sort(ids.begin(), ids.end());
        if (ids != base_ids) {
            std::string missing;
            std::set<std::string> have(ids.begin(), ids.end());
            for (const auto& id : base_ids) {
                if (!have.count(id)) missing += (missing.empty() ? "" : ", ") + id;
            }
            if (missing.empty()) missing = "(extra ids present)";
            throw DataError("build_report: model '" + m.name + "' does not cover sample ids: " + missing);
        }
    }

    // Scores aligned by sorted sample id for pairing.
    std::vector<std::vector<double>> aligned(models.size());
    for (std::size_t m = 0; m < models.size(); ++m) {
        std::vector<ScoredSample> sorted = models[m].samples;
        std::sort(sorted.begin(), sorted.end(),
                  [](const ScoredSample& x, const ScoredSample& y) { return x.id < y.id; });
        for (const auto& s : sorted) aligned[m].push_back(s.score);

        ReportEntry entry;
        entry.model = models[m].name;
        RocResult roc = roc_auc(models[m].samples);
        PrResult pr = auprc(models[m].samples);
        ClassificationMetrics cm = classification_metrics(models[m].samples, threshold);
        entry.auc = roc.auc;
        entry.auprc_value = pr.auprc;
        entry.f1 = cm.f1;
        entry.tpr = cm.tpr;
        entry.tnr = cm.tnr;
        entry.accuracy = cm.accuracy;
        entry.roc_curve = std::move(roc.curve);
        entry.pr_curve = std::move(pr.curve);
        report.entries.push_back(std::move(entry));
    }

    report.p_values.assign(models.size(), std::vector<WilcoxonResult>(models.size()));
    for (std::size_t i = 0; i < models.size(); ++i) {
        for (std::size_t j = 0; j < models.size(); ++j) {
            if (i == j) {
                WilcoxonResult self;
                self.degenerate = true;
                self.p_value = 1.0;
                report.p_values[i][j] = self;
            } else {
                report.p_values[i][j] = wilcoxon_signed_rank(aligned[i], aligned[j]);
            }
        }
    }
    return report;
}

}  // namespace mf
