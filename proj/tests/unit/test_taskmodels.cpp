#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "core/csv.hpp"
#include "core/taskmodels.hpp"

using namespace mf;
namespace fs = std::filesystem;

namespace {

BackboneConfig small_backbone(int h, int w, IntensityMode mode = IntensityMode::rescale_0_1_zscore) {
    BackboneConfig cfg;
    cfg.stem_channels = 4;
    cfg.stage_channels = {8, 16};
    cfg.feature_width = 16;
    cfg.input_profile = {h, w, mode, 1.0};
    return cfg;
}

Image noise_image(int h, int w, std::uint64_t seed) {
    Image img(h, w);
    Rng rng(seed);
    for (double& p : img.pix) p = rng.normal();
    return img;
}

Detection make_det(double x0, double y0, double x1, double y1, double conf, LesionClass cls) {
    Detection d;
    d.box = {x0, y0, x1, y1};
    d.confidence = conf;
    d.cls = cls;
    return d;
}

}  // namespace

TEST_CASE("feature dimension contracts") {
    BackboneConfig cfg = small_backbone(32, 24);
    Rng rng(0);

    DensityViewModel view(cfg, 1);
    Image probe = noise_image(32, 24, 1);
    nn::Tensor x = batch_tensor({&probe}, 1.0);
    auto out = view.forward(x, false, rng);
    CHECK(out.features.shape == std::vector<int>{1, 16});
    CHECK(out.logits.shape == std::vector<int>{1, 2});

    DensityPatientModel patient(cfg, 2);
    std::array<Image, kNumViews> views_img;
    for (int v = 0; v < kNumViews; ++v) views_img[v] = noise_image(32, 24, 10 + v);
    DensityPrediction pred = predict_density(patient, views_img);
    CHECK(pred.feature.size() == 4u * 16u);
    CHECK(pred.p_dense >= 0.0);
    CHECK(pred.p_dense <= 1.0);

    FindingsModel findings(cfg, 3);
    FindingsPrediction fp = predict_findings(findings, noise_image(32, 24, 30));
    CHECK(fp.feature.size() == 16u);
    CHECK(fp.p_findings >= 0.0);
    CHECK(fp.p_findings <= 1.0);

    // identical inputs give identical outputs
    FindingsPrediction fp2 = predict_findings(findings, noise_image(32, 24, 30));
    CHECK(fp.p_findings == fp2.p_findings);
    CHECK(fp.feature == fp2.feature);

    // different inputs move the features
    FindingsPrediction fp3 = predict_findings(findings, noise_image(32, 24, 31));
    CHECK(fp.feature != fp3.feature);
}

TEST_CASE("patient density model is sensitive to branch order") {
    BackboneConfig cfg = small_backbone(32, 24);
    DensityPatientModel patient(cfg, 5);
    std::array<Image, kNumViews> views_img;
    for (int v = 0; v < kNumViews; ++v) views_img[v] = noise_image(32, 24, 40 + v);
    double base = predict_density(patient, views_img).p_dense;
    std::swap(views_img[0], views_img[3]);
    double swapped = predict_density(patient, views_img).p_dense;
    CHECK(base != swapped);
}

TEST_CASE("mean of view scores equals the arithmetic mean") {
    BackboneConfig cfg = small_backbone(32, 24);
    DensityViewModel view(cfg, 7);
    std::array<Image, kNumViews> views_img;
    double acc = 0.0;
    for (int v = 0; v < kNumViews; ++v) {
        views_img[v] = noise_image(32, 24, 50 + v);
        acc += predict_density_view(view, views_img[v]);
    }
    double mean = acc / 4.0;
    double recomputed = 0.0;
    for (int v = 0; v < kNumViews; ++v) recomputed += predict_density_view(view, views_img[v]);
    CHECK(mean == doctest::Approx(recomputed / 4.0).epsilon(1e-15));
}

TEST_CASE("weight transfer copies backbone weights") {
    BackboneConfig patch_cfg = small_backbone(16, 16);
    BackboneConfig find_cfg = small_backbone(32, 24);
    PatchClassifier patch(patch_cfg, 11);
    FindingsModel findings(find_cfg, 12);
    findings.init_backbone_from(patch);

    std::vector<nn::ParamRef> a, b;
    patch.backbone.collect_params("x", a);
    findings.backbone.collect_params("x", b);
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].value->v == b[i].value->v);
    }
}

TEST_CASE("checkpoint round trip reproduces predictions") {
    BackboneConfig cfg = small_backbone(32, 24);
    FindingsModel model(cfg, 21);
    Image probe = noise_image(32, 24, 60);
    double before = predict_findings(model, probe).p_findings;

    fs::path path = fs::temp_directory_path() / "mf_findings_ckpt.mfc";
    model.to_checkpoint().save(path.string());
    FindingsModel loaded = FindingsModel::from_checkpoint(Checkpoint::load(path.string()));
    CHECK(predict_findings(loaded, probe).p_findings == before);
    fs::remove(path);
}

TEST_CASE("checkpoint integrity failures are reported") {
    BackboneConfig cfg = small_backbone(16, 16);
    PatchClassifier model(cfg, 31);
    fs::path path = fs::temp_directory_path() / "mf_corrupt.mfc";
    model.to_checkpoint().save(path.string());
    // flip one byte in the middle
    std::string blob = read_text_file(path.string());
    blob[blob.size() / 2] = static_cast<char>(blob[blob.size() / 2] ^ 0x5a);
    write_text_file(path.string(), blob);
    CHECK_THROWS_WITH(Checkpoint::load(path.string()), doctest::Contains("integrity"));
    fs::remove(path);
}

TEST_CASE("detection sorting and class-level NMS") {
    // ties broken by larger area, then lexicographic (x_min, y_min)
    std::vector<Detection> dets = {
        make_det(0, 0, 5, 10, 0.5, LesionClass::benign_mass),    // area 50
        make_det(0, 0, 10, 10, 0.5, LesionClass::benign_mass),   // area 100
        make_det(2, 0, 10, 10, 0.9, LesionClass::benign_calcification),
    };
    sort_detections(dets);
    CHECK(dets[0].confidence == 0.9);
    CHECK(dets[1].box.area() == 100.0);
    CHECK(dets[2].box.area() == 50.0);

    // overlapping same-class pair at IoU 0.9: only the stronger survives
    std::vector<Detection> pair = {
        make_det(0, 0, 100, 100, 0.8, LesionClass::malignant_mass),
        make_det(0, 0, 100, 95, 0.6, LesionClass::malignant_mass),
    };
    auto kept = nms_per_class(pair, 0.5);
    REQUIRE(kept.size() == 1);
    CHECK(kept[0].confidence == 0.8);

    // different classes never suppress each other
    std::vector<Detection> cross = {
        make_det(0, 0, 100, 100, 0.8, LesionClass::malignant_mass),
        make_det(0, 0, 100, 100, 0.6, LesionClass::benign_mass),
    };
    CHECK(nms_per_class(cross, 0.5).size() == 2);
}

TEST_CASE("class-level NMS is idempotent") {
    Rng rng(123);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Detection> dets;
        int n = 3 + rng.uniform_int(20);
        for (int i = 0; i < n; ++i) {
            double x = rng.uniform(0, 60), y = rng.uniform(0, 60);
            dets.push_back(make_det(x, y, x + rng.uniform(4, 30), y + rng.uniform(4, 30),
                                    std::floor(rng.uniform() * 10) / 10.0,
                                    static_cast<LesionClass>(rng.uniform_int(4))));
        }
        auto once = nms_per_class(dets, 0.5);
        auto twice = nms_per_class(once, 0.5);
        REQUIRE(once.size() == twice.size());
        for (std::size_t i = 0; i < once.size(); ++i) {
            CHECK(once[i].box == twice[i].box);
            CHECK(once[i].confidence == twice[i].confidence);
        }
    }
}

TEST_CASE("localizer anchors, detection contract and checkpoint round trip") {
    LocalizerConfig cfg;
    cfg.backbone = small_backbone(48, 40);
    cfg.anchors.scales = {8.0, 16.0};
    cfg.anchors.aspect_ratios = {1.0};
    cfg.score_threshold = 0.0;  // untrained: accept everything to probe the contract
    cfg.max_detections = 8;
    Localizer model(cfg, 77);

    auto anchors = model.anchor_boxes(6, 5);
    CHECK(anchors.size() == 6u * 5u * 2u);
    // first anchor centred on the first cell
    CHECK(anchors[0].center_x() == doctest::Approx(0.5 * cfg.backbone.stride()));
    CHECK(anchors[0].center_y() == doctest::Approx(0.5 * cfg.backbone.stride()));

    Image probe = noise_image(48, 40, 5);
    DetectionSet det = model.detect(probe);
    CHECK(det.background_feature.size() == 16u);
    CHECK(det.detections.size() <= 8u);
    for (std::size_t i = 0; i < det.detections.size(); ++i) {
        CHECK(det.detections[i].feature.size() == 16u);
        CHECK(det.detections[i].confidence >= 0.0);
        CHECK(det.detections[i].confidence <= 1.0);
        if (i > 0) CHECK(det.detections[i - 1].confidence >= det.detections[i].confidence);
    }

    fs::path path = fs::temp_directory_path() / "mf_localizer.mfc";
    model.to_checkpoint().save(path.string());
    Localizer loaded = Localizer::from_checkpoint(Checkpoint::load(path.string()));
    DetectionSet det2 = loaded.detect(probe);
    REQUIRE(det.detections.size() == det2.detections.size());
    for (std::size_t i = 0; i < det.detections.size(); ++i) {
        CHECK(det.detections[i].box == det2.detections[i].box);
        CHECK(det.detections[i].confidence == det2.detections[i].confidence);
    }
    fs::remove(path);
}

TEST_CASE("localizer rejects lesion-free training sets") {
    LocalizerConfig cfg;
    cfg.backbone = small_backbone(48, 40);
    Localizer model(cfg, 1);
    nn::TrainConfig tc;
    tc.epochs = 1;
    CHECK_THROWS(model.train({}, tc, 0.0));
    Localizer::TrainSample empty;
    empty.image = noise_image(48, 40, 1);
    CHECK_THROWS(model.train({empty}, tc, 0.0));
}

TEST_CASE("training is deterministic under a fixed seed") {
    BackboneConfig cfg = small_backbone(24, 24);
    auto run = [&](std::uint64_t seed) {
        LabeledImageSet train, val;
        Rng rng(900);
        for (int i = 0; i < 12; ++i) {
            Image img = noise_image(24, 24, 200 + i);
            if (i % 2 == 1) {
                for (int y = 8; y < 16; ++y) {
                    for (int x = 8; x < 16; ++x) img.at(y, x) += 3.0;
                }
            }
            (i < 8 ? train : val).images.push_back(img);
            (i < 8 ? train : val).labels.push_back(i % 2);
        }
        PatchClassifier model(cfg, seed);
        nn::TrainConfig tc;
        tc.epochs = 3;
        tc.batch_size = 4;
        tc.learning_rate = 1e-3;
        tc.seed = seed;
        nn::TrainLog log = train_patch_classifier(model, train, val, tc, AugmentationPolicy::identity());
        std::vector<double> losses;
        for (const auto& e : log.epochs) losses.push_back(e.train_loss);
        return losses;
    };
    CHECK(run(42) == run(42));
}

TEST_CASE("patch training requires both classes") {
    BackboneConfig cfg = small_backbone(16, 16);
    PatchClassifier model(cfg, 1);
    LabeledImageSet train, val;
    for (int i = 0; i < 4; ++i) {
        train.images.push_back(noise_image(16, 16, i));
        train.labels.push_back(1);
        val.images.push_back(noise_image(16, 16, 10 + i));
        val.labels.push_back(1);
    }
    nn::TrainConfig tc;
    CHECK_THROWS_WITH(train_patch_classifier(model, train, val, tc, AugmentationPolicy::identity()),
                      doctest::Contains("degenerate patch labels"));
}
