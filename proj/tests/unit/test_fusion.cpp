#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "core/fusion.hpp"
#include "core/rng.hpp"

using namespace mf;
namespace fs = std::filesystem;

namespace {

Detection make_det(double conf, LesionClass cls, int feature_width = 0, double feature_fill = 0.0) {
    Detection d;
    d.box = {0, 0, 10 + conf * 10, 10};
    d.confidence = conf;
    d.cls = cls;
    if (feature_width > 0) d.feature.assign(feature_width, feature_fill);
    return d;
}

FusionInputs basic_inputs(int fw = 0) {
    FusionInputs in;
    in.p_density = 0.7;
    in.p_findings = {0.9, 0.2, 0.1, 0.4};
    if (fw > 0) {
        in.density_feature = std::vector<double>(4 * fw, 0.5);
        for (int v = 0; v < kNumViews; ++v) {
            in.findings_features[v].assign(fw, 0.1 * (v + 1));
            in.background_features[v].assign(fw, -0.2 * (v + 1));
        }
    }
    return in;
}

}  // namespace

TEST_CASE("score vector layout and zero padding") {
    FusionInputs in = basic_inputs();
    FusionConfig cfg{1, FusionTarget::lesion, true};
    FusionVector w = build_score_vector(in, cfg);
    CHECK(w.values == std::vector<double>{0.7, 0.9, 0.2, 0.1, 0.4, 0, 0, 0, 0});
    CHECK(w.layout.score_size() == 9);

    cfg.n = 3;
    w = build_score_vector(in, cfg);
    CHECK(static_cast<int>(w.values.size()) == 1 + 4 + 12);
    CHECK(w.values.size() == 17u);

    cfg.include_density = false;
    w = build_score_vector(in, cfg);
    CHECK(static_cast<int>(w.values.size()) == 4 + 12);

    cfg.n = 0;
    CHECK_THROWS(build_score_vector(in, cfg));
    cfg.n = 6;
    CHECK_THROWS(build_score_vector(in, cfg));
}

TEST_CASE("malignancy target filters detections before padding") {
    FusionInputs in = basic_inputs();
    in.detections[2] = {make_det(0.8, LesionClass::benign_mass),
                        make_det(0.6, LesionClass::malignant_calcification)};
    FusionConfig cfg{2, FusionTarget::malignancy, false};
    FusionVector w = build_score_vector(in, cfg);
    // layout: 4 findings then 4 views x 2 slots; view R-CC (index 2) holds [0.6, 0]
    REQUIRE(w.values.size() == 12u);
    CHECK(w.values[4 + 2 * 2 + 0] == 0.6);
    CHECK(w.values[4 + 2 * 2 + 1] == 0.0);

    // lesion target keeps the top-n regardless of class
    FusionConfig lesion_cfg{2, FusionTarget::lesion, false};
    FusionVector wl = build_score_vector(in, lesion_cfg);
    CHECK(wl.values[4 + 2 * 2 + 0] == 0.8);
    CHECK(wl.values[4 + 2 * 2 + 1] == 0.6);
}

TEST_CASE("slot layout against a brute-force enumeration oracle") {
    Rng rng(71);
    int fw = 4;
    int mismatches = 0;
    int cases = 0;
    for (int trial = 0; trial < 400; ++trial) {
        FusionInputs in = basic_inputs(fw);
        for (int v = 0; v < kNumViews; ++v) {
            int count = rng.uniform_int(7);
            std::vector<Detection> dets;
            for (int k = 0; k < count; ++k) {
                dets.push_back(make_det(1.0 - 0.1 * k - 0.001 * v,
                                        static_cast<LesionClass>(rng.uniform_int(4)), fw,
                                        rng.uniform()));
            }
            in.detections[v] = dets;
        }
        for (int n = 1; n <= 5; ++n) {
            for (FusionTarget target : {FusionTarget::lesion, FusionTarget::malignancy}) {
                for (bool density : {true, false}) {
                    ++cases;
                    FusionConfig cfg{n, target, density};
                    FusionVector w = build_score_vector(in, cfg);
                    FeatureBundle b = build_feature_bundle(in, cfg, fw);

                    // oracle: explicit slot enumeration
                    std::vector<double> expected;
                    if (density) expected.push_back(*in.p_density);
                    for (int v = 0; v < kNumViews; ++v) expected.push_back(in.p_findings[v]);
                    std::vector<std::vector<double>> expected_slots;
                    std::vector<bool> expected_presence;
                    for (int v = 0; v < kNumViews; ++v) {
                        std::vector<const Detection*> kept;
                        for (const auto& d : in.detections[v]) {
                            bool is_mal = d.cls == LesionClass::malignant_mass ||
                                          d.cls == LesionClass::malignant_calcification;
                            if (target == FusionTarget::malignancy && !is_mal) continue;
                            if (static_cast<int>(kept.size()) < n) kept.push_back(&d);
                        }
                        for (int s = 0; s < n; ++s) {
                            if (s < static_cast<int>(kept.size())) {
                                expected.push_back(kept[s]->confidence);
                                expected_slots.push_back(kept[s]->feature);
                                expected_presence.push_back(true);
                            } else {
                                expected.push_back(0.0);
                                expected_slots.push_back(in.background_features[v]);
                                expected_presence.push_back(false);
                            }
                        }
                    }
                    if (w.values != expected) ++mismatches;
                    if (b.localizer_branches != expected_slots) ++mismatches;
                    if (b.presence != expected_presence) ++mismatches;
                }
            }
        }
    }
    CHECK(mismatches == 0);
    CHECK(cases >= 4000);
}

TEST_CASE("feature bundle substitutes background features and validates lengths") {
    int fw = 6;
    FusionInputs in = basic_inputs(fw);
    FusionConfig cfg{2, FusionTarget::lesion, true};
    FeatureBundle b = build_feature_bundle(in, cfg, fw);
    REQUIRE(b.localizer_branches.size() == 8u);
    for (int v = 0; v < kNumViews; ++v) {
        for (int s = 0; s < 2; ++s) {
            CHECK(b.localizer_branches[v * 2 + s] == in.background_features[v]);
            CHECK_FALSE(b.presence[v * 2 + s]);
        }
    }

    // wrong feature length is reported with the branch name
    FusionInputs bad = in;
    bad.findings_features[1].resize(fw - 1);
    CHECK_THROWS_WITH(build_feature_bundle(bad, cfg, fw), doctest::Contains("findings"));

    // flatten / unflatten round trip
    std::vector<double> flat = b.flatten();
    FeatureBundle back = FeatureBundle::unflatten(flat, b.layout, fw);
    CHECK(back.flatten() == flat);
}

TEST_CASE("zero-padding affects exactly the emptied view") {
    int fw = 3;
    FusionInputs full = basic_inputs(fw);
    for (int v = 0; v < kNumViews; ++v) {
        full.detections[v] = {make_det(0.9, LesionClass::benign_mass, fw, 0.7)};
    }
    FusionConfig cfg{1, FusionTarget::lesion, true};
    FusionVector w_full = build_score_vector(full, cfg);

    FusionInputs emptied = full;
    emptied.detections[1].clear();
    FusionVector w_empty = build_score_vector(emptied, cfg);
    for (std::size_t i = 0; i < w_full.values.size(); ++i) {
        bool is_view1_slot = i == 1 + 4 + 1;
        if (is_view1_slot) {
            CHECK(w_empty.values[i] == 0.0);
        } else {
            CHECK(w_empty.values[i] == w_full.values[i]);
        }
    }
    FeatureBundle b_full = build_feature_bundle(full, cfg, fw);
    FeatureBundle b_empty = build_feature_bundle(emptied, cfg, fw);
    for (int s = 0; s < 4; ++s) {
        if (s == 1) CHECK(b_empty.localizer_branches[s] == emptied.background_features[1]);
        else CHECK(b_empty.localizer_branches[s] == b_full.localizer_branches[s]);
    }
}

TEST_CASE("normalizer endpoints, degenerate dimensions and clamping") {
    Normalizer n = Normalizer::fit({{2.0, 5.0}, {4.0, 5.0}});
    CHECK(n.apply({2.0, 5.0}) == std::vector<double>{-1.0, 0.0});
    CHECK(n.apply({4.0, 5.0}) == std::vector<double>{1.0, 0.0});
    CHECK(n.apply({3.0, 5.0}) == std::vector<double>{0.0, 0.0});
    CHECK(n.apply({10.0, 7.0}) == std::vector<double>{1.0, 0.0});  // clamped, degenerate

    // fit-then-apply lands every training vector in [-1, 1] exactly
    Rng rng(15);
    std::vector<std::vector<double>> data;
    for (int i = 0; i < 50; ++i) {
        std::vector<double> v;
        for (int d = 0; d < 7; ++d) v.push_back(rng.normal() * 10.0);
        data.push_back(v);
    }
    Normalizer big = Normalizer::fit(data);
    for (const auto& v : data) {
        for (double x : big.apply(v)) {
            CHECK(x >= -1.0);
            CHECK(x <= 1.0);
        }
    }
    // refitting on normalized data keeps it fixed (idempotence on in-range data)
    std::vector<std::vector<double>> normalized;
    for (const auto& v : data) normalized.push_back(big.apply(v));
    Normalizer again = Normalizer::fit(normalized);
    for (const auto& v : normalized) {
        auto twice = again.apply(v);
        for (std::size_t i = 0; i < v.size(); ++i) CHECK(std::fabs(twice[i] - v[i]) < 1e-12);
    }

    // pack / unpack
    Normalizer thawed = Normalizer::unpack(big.pack());
    CHECK(thawed.apply(data[0]) == big.apply(data[0]));
}

TEST_CASE("ensemble_max semantics and invariances") {
    FusionInputs in = basic_inputs();
    CHECK(ensemble_max(in, FusionTarget::lesion) == 0.9);

    // no malignant detections anywhere scores zero
    in.detections[0] = {make_det(0.95, LesionClass::benign_mass)};
    CHECK(ensemble_max(in, FusionTarget::malignancy) == 0.0);

    in.detections[3] = {make_det(0.4, LesionClass::malignant_calcification),
                        make_det(0.2, LesionClass::malignant_mass)};
    CHECK(ensemble_max(in, FusionTarget::malignancy) == 0.4);

    // permutation invariance across views
    FusionInputs permuted = in;
    std::swap(permuted.p_findings[0], permuted.p_findings[2]);
    std::swap(permuted.detections[0], permuted.detections[3]);
    CHECK(ensemble_max(permuted, FusionTarget::lesion) == ensemble_max(in, FusionTarget::lesion));
    CHECK(ensemble_max(permuted, FusionTarget::malignancy) ==
          ensemble_max(in, FusionTarget::malignancy));

    // monotonicity: raising any input cannot lower the output
    FusionInputs raised = in;
    raised.p_findings[1] = std::min(1.0, raised.p_findings[1] + 0.3);
    CHECK(ensemble_max(raised, FusionTarget::lesion) >= ensemble_max(in, FusionTarget::lesion));
    raised.detections[3][1].confidence = 0.99;
    CHECK(ensemble_max(raised, FusionTarget::malignancy) >=
          ensemble_max(in, FusionTarget::malignancy));
}

namespace {

// Linearly separable score vectors: label 1 iff the first findings slot > 0.5.
void separable_vectors(int count, int n, bool density, std::vector<FusionVector>& vecs,
                       std::vector<int>& labels, Rng& rng) {
    for (int i = 0; i < count; ++i) {
        FusionInputs in;
        in.p_density = rng.uniform();
        int label = i % 2;
        in.p_findings = {label ? rng.uniform(0.7, 1.0) : rng.uniform(0.0, 0.3), rng.uniform(),
                         rng.uniform(), rng.uniform()};
        FusionConfig cfg{n, FusionTarget::lesion, density};
        vecs.push_back(build_score_vector(in, cfg));
        labels.push_back(label);
    }
}

}  // namespace

TEST_CASE("score fusion grid search on separable data") {
    Rng rng(5);
    std::vector<FusionVector> train, val;
    std::vector<int> train_labels, val_labels;
    separable_vectors(60, 2, true, train, train_labels, rng);
    separable_vectors(24, 2, true, val, val_labels, rng);

    for (ScoreHeadKind kind : {ScoreHeadKind::mlp, ScoreHeadKind::svm_rbf,
                               ScoreHeadKind::random_forest}) {
        ScoreFusionTraining result =
            train_score_fusion(train, train_labels, val, val_labels, kind, 99);
        std::size_t expected_grid = kind == ScoreHeadKind::mlp ? 3 : kind == ScoreHeadKind::svm_rbf ? 9 : 6;
        CHECK(result.grid_log.size() == expected_grid);
        double best = 0.0;
        for (const auto& g : result.grid_log) best = std::max(best, g.validation_auc);
        CHECK(best == doctest::Approx(1.0));
        // the selected head predicts the separating feature
        double hi = result.head.predict(val[0].layout.density_slot ? val[0] : val[0]);
        (void)hi;
        for (std::size_t i = 0; i < val.size(); ++i) {
            double p = result.head.predict(val[i]);
            CHECK(p >= 0.0);
            CHECK(p <= 1.0);
        }
    }
}

TEST_CASE("score head checkpoint round trip and layout guard") {
    Rng rng(6);
    std::vector<FusionVector> train, val;
    std::vector<int> train_labels, val_labels;
    separable_vectors(40, 1, true, train, train_labels, rng);
    separable_vectors(16, 1, true, val, val_labels, rng);
    ScoreFusionTraining result =
        train_score_fusion(train, train_labels, val, val_labels, ScoreHeadKind::mlp, 3);

    fs::path path = fs::temp_directory_path() / "mf_head.mfc";
    result.head.target = FusionTarget::lesion;
    result.head.to_checkpoint().save(path.string());
    ScoreFusionHead loaded = ScoreFusionHead::from_checkpoint(Checkpoint::load(path.string()));
    for (const auto& v : val) {
        CHECK(loaded.predict(v) == doctest::Approx(result.head.predict(v)).epsilon(1e-12));
    }
    // feeding a vector with a different layout fails loudly
    std::vector<FusionVector> wrong;
    std::vector<int> wrong_labels;
    separable_vectors(2, 3, true, wrong, wrong_labels, rng);
    CHECK_THROWS_WITH(loaded.predict(wrong[0]), doctest::Contains("layout"));
    fs::remove(path);
}

TEST_CASE("feature fusion embedding network trains and is deterministic at inference") {
    int fw = 8;
    Rng rng(44);
    auto make_bundle = [&](int label) {
        FusionInputs in;
        in.p_density = rng.uniform();
        in.density_feature = std::vector<double>(4 * fw);
        for (auto& x : *in.density_feature) x = rng.normal();
        for (int v = 0; v < kNumViews; ++v) {
            in.p_findings[v] = rng.uniform();
            in.findings_features[v].assign(fw, 0.0);
            for (auto& x : in.findings_features[v]) x = rng.normal() + (label ? 1.5 : -1.5);
            in.background_features[v].assign(fw, 0.0);
            for (auto& x : in.background_features[v]) x = rng.normal();
        }
        FusionConfig cfg{1, FusionTarget::lesion, true};
        return build_feature_bundle(in, cfg, fw);
    };

    std::vector<FeatureBundle> train, val;
    std::vector<int> train_labels, val_labels;
    std::vector<std::vector<double>> flats;
    for (int i = 0; i < 48; ++i) {
        train.push_back(make_bundle(i % 2));
        train_labels.push_back(i % 2);
        flats.push_back(train.back().flatten());
    }
    Normalizer norm = Normalizer::fit(flats);
    for (auto& b : train) b = FeatureBundle::unflatten(norm.apply(b.flatten()), b.layout, fw);
    for (int i = 0; i < 16; ++i) {
        FeatureBundle b = make_bundle(i % 2);
        val.push_back(FeatureBundle::unflatten(norm.apply(b.flatten()), b.layout, fw));
        val_labels.push_back(i % 2);
    }

    EmbeddingNetConfig net_cfg;
    net_cfg.feature_width = fw;
    net_cfg.n = 1;
    net_cfg.include_density = true;
    net_cfg.branch_channels = 8;
    net_cfg.head_hidden = 16;
    nn::TrainConfig tc;
    tc.learning_rate = 5e-4;
    tc.batch_size = 8;
    tc.epochs = 60;
    tc.early_stop = nn::EarlyStopMonitor::validation_loss;
    tc.early_stop_patience = 10;
    tc.early_stop_tolerance = 0.001;
    tc.stratified_batches = true;
    tc.seed = 5;
    FeatureFusionTraining result =
        train_feature_fusion(train, train_labels, val, val_labels, net_cfg, tc);
    CHECK(result.validation_auc > 0.95);

    // inference is deterministic (dropout only active in training)
    double p1 = result.net->predict(val[0]);
    double p2 = result.net->predict(val[0]);
    CHECK(p1 == p2);
    CHECK(p1 >= 0.0);
    CHECK(p1 <= 1.0);

    // checkpoint round trip
    fs::path path = fs::temp_directory_path() / "mf_embed.mfc";
    result.net->to_checkpoint().save(path.string());
    EmbeddingNet loaded = EmbeddingNet::from_checkpoint(Checkpoint::load(path.string()));
    CHECK(loaded.predict(val[0]) == doctest::Approx(p1).epsilon(1e-12));
    fs::remove(path);
}

TEST_CASE("retained detections agree between score and feature paths") {
    Rng rng(8);
    int fw = 3;
    for (int trial = 0; trial < 60; ++trial) {
        FusionInputs in = basic_inputs(fw);
        for (int v = 0; v < kNumViews; ++v) {
            int count = rng.uniform_int(6);
            for (int k = 0; k < count; ++k) {
                in.detections[v].push_back(make_det(1.0 - 0.05 * k,
                                                    static_cast<LesionClass>(rng.uniform_int(4)), fw,
                                                    rng.uniform()));
            }
        }
        FusionConfig cfg{1 + rng.uniform_int(5),
                         rng.bernoulli(0.5) ? FusionTarget::lesion : FusionTarget::malignancy,
                         true};
        for (int v = 0; v < kNumViews; ++v) {
            auto kept = retained_detections(in.detections[v], cfg);
            FusionVector w = build_score_vector(in, cfg);
            FeatureBundle b = build_feature_bundle(in, cfg, fw);
            for (std::size_t s = 0; s < kept.size(); ++s) {
                std::size_t slot = v * cfg.n + s;
                CHECK(w.values[1 + 4 + slot] == kept[s]->confidence);
                CHECK(b.localizer_branches[slot] == kept[s]->feature);
                CHECK(b.presence[slot]);
            }
        }
    }
}
