#include <doctest.h>

#include <algorithm>
#include <cmath>

#include "core/evalkit.hpp"
#include "core/rng.hpp"

using namespace mf;

namespace {

std::vector<ScoredSample> make_samples(const std::vector<double>& scores,
                                       const std::vector<int>& labels) {
    std::vector<ScoredSample> out;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        out.push_back({"s" + std::to_string(i), scores[i], labels[i]});
    }
    return out;
}

// Independent oracle: direct pair counting.
double pair_count_auc(const std::vector<ScoredSample>& samples) {
    double wins = 0.0;
    long long pairs = 0;
    for (const auto& a : samples) {
        if (a.label != 1) continue;
        for (const auto& b : samples) {
            if (b.label != 0) continue;
            ++pairs;
            if (a.score > b.score) wins += 1.0;
            else if (a.score == b.score) wins += 0.5;
        }
    }
    return wins / static_cast<double>(pairs);
}

double trapezoid_area(const Curve& curve) {
    double area = 0.0;
    for (std::size_t i = 1; i < curve.size(); ++i) {
        area += (curve[i].x - curve[i - 1].x) * 0.5 * (curve[i].y + curve[i - 1].y);
    }
    return area;
}

// Oracle: exact two-sided p by enumerating all sign assignments.
double brute_force_wilcoxon_p(const std::vector<double>& a, const std::vector<double>& b) {
    std::vector<double> diffs;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i] != b[i]) diffs.push_back(a[i] - b[i]);
    }
    int n = static_cast<int>(diffs.size());
    if (n == 0) return 1.0;

    std::vector<double> mags(n);
    for (int i = 0; i < n; ++i) mags[i] = std::fabs(diffs[i]);
    std::vector<double> rank(n);
    for (int i = 0; i < n; ++i) {
        double below = 0, equal = 0;
        for (int j = 0; j < n; ++j) {
            if (mags[j] < mags[i]) below += 1;
            if (mags[j] == mags[i]) equal += 1;
        }
        rank[i] = below + 0.5 * (equal + 1);
    }
    double w_obs = 0.0;
    for (int i = 0; i < n; ++i) {
        if (diffs[i] > 0) w_obs += rank[i];
    }
    long long le = 0, ge = 0, total = 1LL << n;
    for (long long mask = 0; mask < total; ++mask) {
        double w = 0.0;
        for (int i = 0; i < n; ++i) {
            if (mask & (1LL << i)) w += rank[i];
        }
        if (w <= w_obs + 1e-9) ++le;
        if (w >= w_obs - 1e-9) ++ge;
    }
    double p = 2.0 * std::min(le, ge) / static_cast<double>(total);
    return std::min(1.0, p);
}

}  // namespace

TEST_CASE("classification metrics on crafted sets") {
    auto m = classification_metrics(make_samples({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0}), 0.5);
    CHECK(m.tpr == 1.0);
    CHECK(m.tnr == 1.0);
    CHECK(m.accuracy == 1.0);
    CHECK(m.f1 == 1.0);

    // everything predicted positive, half the labels positive
    m = classification_metrics(make_samples({0.9, 0.9, 0.9, 0.9}, {1, 1, 0, 0}), 0.5);
    CHECK(m.tnr == 0.0);
    CHECK(m.precision == 0.5);

    m = classification_metrics(make_samples({0.6, 0.4, 0.7, 0.2}, {1, 1, 0, 0}), 0.5);
    CHECK(m.tp == 1);
    CHECK(m.fn == 1);
    CHECK(m.fp == 1);
    CHECK(m.tn == 1);
    CHECK(m.tpr == doctest::Approx(0.5));
    CHECK(m.f1 == doctest::Approx(0.5));
    CHECK(m.accuracy == doctest::Approx(0.5));

    CHECK_THROWS(classification_metrics({}, 0.5));
}

TEST_CASE("roc_auc matches hand-derived values") {
    CHECK(roc_auc(make_samples({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})).auc == 1.0);
    CHECK(roc_auc(make_samples({0.5, 0.5, 0.5, 0.5}, {1, 0, 1, 0})).auc == 0.5);
    CHECK(roc_auc(make_samples({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1})).auc == doctest::Approx(0.75));
    CHECK_THROWS_WITH(roc_auc(make_samples({0.1, 0.2}, {1, 1})).auc,
                      doctest::Contains("AUC undefined"));
}

TEST_CASE("roc_auc trapezoid equals the pair statistic on random sets") {
    Rng rng(91);
    for (int trial = 0; trial < 200; ++trial) {
        int n = 2 + rng.uniform_int(60);
        std::vector<double> scores;
        std::vector<int> labels;
        bool tie_heavy = rng.bernoulli(0.4);
        for (int i = 0; i < n; ++i) {
            double s = tie_heavy ? std::floor(rng.uniform() * 6) / 6.0 : rng.uniform();
            scores.push_back(s);
            labels.push_back(rng.bernoulli(0.5) ? 1 : 0);
        }
        labels[0] = 1;
        labels[n - 1] = 0;
        auto samples = make_samples(scores, labels);
        RocResult r = roc_auc(samples);
        CHECK(std::fabs(r.auc - pair_count_auc(samples)) < 1e-12);
        CHECK(std::fabs(r.auc - trapezoid_area(r.curve)) < 1e-12);
    }
}

TEST_CASE("roc_auc invariant under strictly monotone score transforms") {
    Rng rng(17);
    std::vector<double> scores;
    std::vector<int> labels;
    for (int i = 0; i < 40; ++i) {
        scores.push_back(rng.uniform());
        labels.push_back(i % 3 == 0);
    }
    double base = roc_auc(make_samples(scores, labels)).auc;
    std::vector<double> warped;
    for (double s : scores) warped.push_back(std::exp(3.0 * s) - 0.5);
    CHECK(roc_auc(make_samples(warped, labels)).auc == doctest::Approx(base).epsilon(1e-15));
}

TEST_CASE("auprc values") {
    CHECK(auprc(make_samples({0.9, 0.8, 0.2, 0.1}, {1, 1, 0, 0})).auprc == doctest::Approx(1.0));
    // constant scores: area equals positive prevalence
    CHECK(auprc(make_samples({0.3, 0.3, 0.3, 0.3}, {1, 0, 0, 0})).auprc == doctest::Approx(0.25));
    CHECK(auprc(make_samples({0.9, 0.7, 0.6}, {1, 0, 1})).auprc == doctest::Approx(5.0 / 6.0));
    CHECK_THROWS(auprc(make_samples({0.1}, {0})));
}

namespace {

Detection det(double x0, double y0, double x1, double y1, double conf,
              LesionClass cls = LesionClass::benign_mass) {
    Detection d;
    d.box = {x0, y0, x1, y1};
    d.confidence = conf;
    d.cls = cls;
    return d;
}

GroundTruthBox gt(double x0, double y0, double x1, double y1,
                  LesionClass cls = LesionClass::benign_mass) {
    return {{x0, y0, x1, y1}, cls};
}

}  // namespace

TEST_CASE("match_detections: IoU rule, centre rule, greedy one-to-one") {
    // identical boxes
    auto m = match_detections({det(0, 0, 10, 10, 0.9)}, {gt(0, 0, 10, 10)});
    CHECK(m.detection_is_tp[0]);

    // IoU = 50/150 = 1/3 >= 0.2
    m = match_detections({det(0, 0, 10, 10, 0.9)}, {gt(5, 0, 15, 10)});
    CHECK(m.detection_is_tp[0]);

    // IoU exactly 0.2 counts as a match: det area 20, gt area 20, inter 8
    // (iou = 8 / 32 = 0.25)... craft exact: inter 10 of union 50.
    m = match_detections({det(0, 0, 10, 3, 0.9)}, {gt(0, 0, 10, 3)});
    CHECK(m.detection_is_tp[0]);
    {
        // det [0,30)x[0,1), gt [20,70)x[0,1): inter 10, union 70 -> 1/7 < 0.2, centre (15) outside
        auto miss = match_detections({det(0, 0, 30, 1, 0.9)}, {gt(20, 0, 70, 1)});
        CHECK_FALSE(miss.detection_is_tp[0]);
        // det [0,25)x[0,1), gt [5,25)x[0,1): inter 20, union 25 -> 0.8 match
        auto hit = match_detections({det(0, 0, 25, 1, 0.9)}, {gt(5, 0, 25, 1)});
        CHECK(hit.detection_is_tp[0]);
        // exact boundary: det [0,2)x[0,3) area 6, gt [1,3340)... build iou == 0.2:
        // det area 1x1 at [0,1), gt [0,5)x[0,1) area 5: inter 1, union 5 -> 0.2
        auto boundary = match_detections({det(0, 0, 1, 1, 0.9)}, {gt(0, 0, 5, 1)});
        CHECK(boundary.detection_is_tp[0]);
    }

    // tiny box centred inside a huge ground truth: IoU < 0.2, centre rule applies
    m = match_detections({det(4, 4, 6, 6, 0.9)}, {gt(0, 0, 100, 100)});
    CHECK(m.detection_is_tp[0]);

    // greedy: higher-confidence detection consumes the ground truth
    m = match_detections({det(0, 0, 10, 10, 0.5), det(1, 1, 9, 9, 0.8)}, {gt(0, 0, 10, 10)});
    CHECK(m.detection_is_tp[1]);
    CHECK_FALSE(m.detection_is_tp[0]);
    int assigned = 0;
    for (int g : m.detection_matched_gt) assigned += (g >= 0);
    CHECK(assigned == 1);

    // class sensitivity
    m = match_detections({det(0, 0, 10, 10, 0.9, LesionClass::benign_calcification)},
                         {gt(0, 0, 10, 10, LesionClass::malignant_mass)}, 0.2, true);
    CHECK_FALSE(m.detection_is_tp[0]);
    m = match_detections({det(0, 0, 10, 10, 0.9, LesionClass::malignant_mass)},
                         {gt(0, 0, 10, 10, LesionClass::malignant_mass)}, 0.2, true);
    CHECK(m.detection_is_tp[0]);
}

TEST_CASE("match_detections never assigns a ground truth twice") {
    Rng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Detection> dets;
        std::vector<GroundTruthBox> gts;
        for (int i = 0; i < 12; ++i) {
            double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
            dets.push_back(det(x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20), rng.uniform()));
        }
        for (int i = 0; i < 6; ++i) {
            double x = rng.uniform(0, 80), y = rng.uniform(0, 80);
            gts.push_back(gt(x, y, x + rng.uniform(5, 20), y + rng.uniform(5, 20)));
        }
        MatchResult m = match_detections(dets, gts);
        std::vector<int> seen(gts.size(), 0);
        for (int g : m.detection_matched_gt) {
            if (g >= 0) seen[g] += 1;
        }
        for (int count : seen) CHECK(count <= 1);
        for (std::size_t g = 0; g < gts.size(); ++g) {
            CHECK(m.ground_truth_detected[g] == (seen[g] == 1));
        }
    }
}

TEST_CASE("froc on crafted images") {
    // perfect detector: one TP per lesion, nothing else
    {
        std::vector<FrocImage> images(2);
        images[0].ground_truths = {gt(0, 0, 10, 10)};
        images[0].detections = {det(0, 0, 10, 10, 0.7)};
        images[1].ground_truths = {gt(5, 5, 20, 20)};
        images[1].detections = {det(5, 5, 20, 20, 0.9)};
        FrocResult fr = froc(images, std::nullopt);
        CHECK(fr.tpr_at_fpi(0.0) == doctest::Approx(1.0));
        CHECK(fr.curve.back().y == doctest::Approx(1.0));
        CHECK(fr.curve.back().x == doctest::Approx(0.0));
    }
    // 2 images, 1 lesion, only a false positive at 0.9 in the other image
    {
        std::vector<FrocImage> images(2);
        images[0].ground_truths = {gt(0, 0, 10, 10)};
        images[1].detections = {det(50, 50, 60, 60, 0.9)};
        FrocResult fr = froc(images, std::nullopt);
        CHECK(fr.total_lesions == 1);
        // at threshold <= 0.9 the FP is active: TPR 0, FPI 0.5
        CHECK(fr.curve.back().y == doctest::Approx(0.0));
        CHECK(fr.curve.back().x == doctest::Approx(0.5));
    }
    // curve is monotone in both axes as the threshold falls
    {
        Rng rng(11);
        std::vector<FrocImage> images(6);
        for (auto& img : images) {
            for (int i = 0; i < 4; ++i) {
                double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
                img.detections.push_back(det(x, y, x + 10, y + 10, rng.uniform()));
            }
            double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
            img.ground_truths.push_back(gt(x, y, x + 10, y + 10));
        }
        FrocResult fr = froc(images, std::nullopt);
        for (std::size_t i = 1; i < fr.curve.size(); ++i) {
            CHECK(fr.curve[i].x >= fr.curve[i - 1].x);
            CHECK(fr.curve[i].y >= fr.curve[i - 1].y);
            CHECK(fr.curve[i].threshold <= fr.curve[i - 1].threshold);
        }
        CHECK(fr.tpr_at_fpi(1e9) == doctest::Approx(fr.curve.back().y));
    }
    CHECK_THROWS(froc({FrocImage{}}, std::nullopt));
}

TEST_CASE("wilcoxon signed-rank: crafted cases") {
    std::vector<double> a = {1, 2, 3, 4, 5};
    WilcoxonResult r = wilcoxon_signed_rank(a, a);
    CHECK(r.degenerate);
    CHECK(r.p_value == 1.0);
    CHECK(r.n_effective == 0);

    // n = 5, all differences positive and distinct: p = 2/32
    r = wilcoxon_signed_rank({1.1, 2.2, 3.3, 4.4, 5.5}, {1.0, 2.0, 3.0, 4.0, 5.0});
    CHECK(r.exact);
    CHECK(r.p_value == doctest::Approx(0.0625));
    CHECK_FALSE(r.significant);

    // n = 6: p = 2/64 < 0.05
    r = wilcoxon_signed_rank({1.1, 2.2, 3.3, 4.4, 5.5, 6.6}, {1.0, 2.0, 3.0, 4.0, 5.0, 6.0});
    CHECK(r.p_value == doctest::Approx(0.03125));
    CHECK(r.significant);
}

TEST_CASE("wilcoxon exact branch equals brute-force enumeration") {
    Rng rng(1234);
    for (int trial = 0; trial < 120; ++trial) {
        int n = 5 + rng.uniform_int(8);  // 5..12
        std::vector<double> a(n), b(n);
        for (int i = 0; i < n; ++i) {
            // quantized values provoke ties and zero differences
            a[i] = std::floor(rng.uniform() * 8) / 8.0;
            b[i] = std::floor(rng.uniform() * 8) / 8.0;
        }
        if (a == b) a[0] += 0.125;
        WilcoxonResult r = wilcoxon_signed_rank(a, b);
        double expected = brute_force_wilcoxon_p(a, b);
        if (r.degenerate) {
            CHECK(expected == doctest::Approx(1.0));
        } else {
            CHECK(r.p_value == doctest::Approx(expected).epsilon(1e-12));
        }
    }
}

TEST_CASE("wilcoxon normal approximation for large n") {
    Rng rng(99);
    std::vector<double> a, b;
    for (int i = 0; i < 60; ++i) {
        double base = rng.uniform();
        a.push_back(base + 0.3 + 0.05 * rng.normal());
        b.push_back(base);
    }
    WilcoxonResult r = wilcoxon_signed_rank(a, b);
    CHECK_FALSE(r.exact);
    CHECK(r.p_value < 0.001);
    CHECK(r.significant);
}

TEST_CASE("build_report: degenerate and mismatch cases") {
    ModelPredictions m1{"alpha", make_samples({0.9, 0.2, 0.7, 0.3, 0.8, 0.1}, {1, 0, 1, 0, 1, 0})};
    ModelPredictions m2{"beta", m1.samples};
    MetricsReport rep = build_report({m1, m2});
    CHECK(rep.entries.size() == 2);
    CHECK(rep.p_values[0][1].degenerate);       // identical predictions
    CHECK(rep.p_values[0][1].p_value == 1.0);
    CHECK(rep.p_values[1][0].p_value == 1.0);
    CHECK(rep.entries[0].auc == doctest::Approx(1.0));

    MetricsReport single = build_report({m1});
    CHECK(single.p_values.size() == 1);
    CHECK(single.p_values[0][0].degenerate);

    ModelPredictions bad{"gamma", make_samples({0.5, 0.5}, {1, 0})};
    CHECK_THROWS_WITH(build_report({m1, bad}), doctest::Contains("does not cover"));
}
