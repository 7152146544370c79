#include <doctest.h>

#include <array>
#include <cmath>
#include <filesystem>

#include "core/dataset.hpp"
#include "core/image.hpp"
#include "core/preprocess.hpp"
#include "core/synthgen.hpp"

using namespace mf;
namespace fs = std::filesystem;

namespace {

SynthSpec small_spec() {
    SynthSpec spec;
    spec.image_height = 96;
    spec.image_width = 80;
    spec.n_cases = 8;
    spec.mass_radius_range = {6.0, 12.0};
    spec.calc_radius_range = {5.0, 9.0};
    spec.texture_grain = 12.0;
    spec.seed = 42;
    return spec;
}

}  // namespace

TEST_CASE("spec validation") {
    SynthSpec spec = small_spec();
    CHECK_NOTHROW(spec.validate());
    SynthSpec bad = spec;
    bad.density_class_probs = {0.5, 0.5, 0.5, 0.5};
    CHECK_THROWS(bad.validate());
    bad = spec;
    bad.mass_radius_range = {30.0, 40.0};  // >= min(dims)/4
    CHECK_THROWS(bad.validate());
    bad = spec;
    bad.lesion_count_distribution = {0.5, 0.4};
    CHECK_THROWS(bad.validate());
}

TEST_CASE("lesion-free distribution yields normal cases") {
    SynthSpec spec = small_spec();
    spec.lesion_count_distribution = {1.0};
    Exam e = generate_exam(spec, 0);
    CHECK(e.lesions.empty());
    CaseLabels labels = derive_case_labels(e);
    CHECK(labels.pathology_category == PathologyCategory::normal);
}

TEST_CASE("forced malignant mass is labelled malignant") {
    SynthSpec spec = small_spec();
    spec.lesion_count_distribution = {0.0, 1.0};
    spec.malignant_fraction = 1.0;
    spec.mass_fraction = 1.0;
    spec.occlusion_probability = 0.0;
    Exam e = generate_exam(spec, 3);
    REQUIRE(!e.lesions.empty());
    CHECK(derive_case_labels(e).is_malignant);
    // the lesion is rendered in both same-side views
    CHECK(e.lesions.size() == 2);
    CHECK(e.lesions[0].view.laterality == e.lesions[1].view.laterality);
    CHECK(e.lesions[0].view.projection != e.lesions[1].view.projection);
}

TEST_CASE("generation is deterministic in (seed, case_index)") {
    SynthSpec spec = small_spec();
    Exam a = generate_exam(spec, 5);
    Exam b = generate_exam(spec, 5);
    REQUIRE(a.lesions.size() == b.lesions.size());
    for (std::size_t i = 0; i < a.lesions.size(); ++i) {
        CHECK(a.lesions[i].box == b.lesions[i].box);
        CHECK(a.lesions[i].view == b.lesions[i].view);
    }
    for (ViewKey v : all_views()) {
        CHECK(a.image(v).mem->pix == b.image(v).mem->pix);
    }
    // a different case index gives different pixels
    Exam c = generate_exam(spec, 6);
    CHECK(a.image(all_views()[0]).mem->pix != c.image(all_views()[0]).mem->pix);
}

TEST_CASE("manifest round trip preserves labels and boxes") {
    SynthSpec spec = small_spec();
    spec.n_cases = 6;
    auto exams = generate_dataset(spec);
    fs::path dir = fs::temp_directory_path() / "mf_synth_roundtrip";
    fs::remove_all(dir);
    fs::create_directories(dir);
    std::string manifest = emit_dataset(spec, exams, dir.string());

    LoadedDataset loaded = load_manifest(manifest);
    REQUIRE(loaded.exams.size() == exams.size());
    for (std::size_t i = 0; i < exams.size(); ++i) {
        const Exam& a = exams[i];
        const Exam& b = loaded.exams[i];
        CHECK(a.case_id == b.case_id);
        CHECK(a.density == b.density);
        REQUIRE(a.lesions.size() == b.lesions.size());
        for (std::size_t l = 0; l < a.lesions.size(); ++l) {
            CHECK(a.lesions[l].view == b.lesions[l].view);
            CHECK(a.lesions[l].box == b.lesions[l].box);
            CHECK(a.lesions[l].lesion_type == b.lesions[l].lesion_type);
            CHECK(a.lesions[l].pathology == b.lesions[l].pathology);
        }
        // pixel data survives the PNG round trip
        for (ViewKey v : all_views()) {
            Image reread = load_image(b.image(v));
            REQUIRE(reread.size() == a.image(v).mem->size());
            for (std::size_t p = 0; p < reread.size(); ++p) {
                CHECK(std::fabs(reread.pix[p] - a.image(v).mem->pix[p]) <= 0.5);
            }
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("empirical density class fractions track the configured mix") {
    SynthSpec spec = small_spec();
    spec.image_height = 32;  // label draw does not depend on the frame
    spec.image_width = 32;
    spec.mass_radius_range = {3.0, 5.0};
    spec.calc_radius_range = {3.0, 5.0};
    spec.lesion_count_distribution = {1.0};
    spec.n_cases = 1000;
    spec.density_class_probs = {0.13, 0.38, 0.30, 0.19};
    std::array<int, 4> counts{};
    for (int i = 0; i < spec.n_cases; ++i) {
        counts[static_cast<int>(generate_exam(spec, i).density)] += 1;
    }
    for (int c = 0; c < 4; ++c) {
        double frac = counts[c] / static_cast<double>(spec.n_cases);
        CHECK(std::fabs(frac - spec.density_class_probs[c]) < 0.04);
    }
}

TEST_CASE("high-pass texture energy increases across density classes") {
    SynthSpec spec = small_spec();
    spec.n_cases = 160;
    spec.lesion_count_distribution = {1.0};
    spec.noise_sigma = 0.0;  // texture only
    std::array<double, 4> energy{};
    std::array<int, 4> counts{};
    for (int i = 0; i < spec.n_cases; ++i) {
        Exam e = generate_exam(spec, i);
        const Image& img = *e.image(all_views()[0]).mem;
        Image low = gaussian_blur(img, 3.0);
        Image mask = segment_breast(img);
        double acc = 0.0;
        long long n = 0;
        for (std::size_t p = 0; p < img.size(); ++p) {
            if (mask.pix[p] != 0) {
                double d = img.pix[p] - low.pix[p];
                acc += d * d;
                ++n;
            }
        }
        energy[static_cast<int>(e.density)] += acc / static_cast<double>(n);
        counts[static_cast<int>(e.density)] += 1;
    }
    for (int c = 0; c < 4; ++c) {
        REQUIRE(counts[c] > 0);
        energy[c] /= counts[c];
    }
    CHECK(energy[0] < energy[1]);
    CHECK(energy[1] < energy[2]);
    CHECK(energy[2] < energy[3]);
}

TEST_CASE("ground-truth boxes lie inside the segmented breast") {
    SynthSpec spec = small_spec();
    spec.n_cases = 24;
    spec.lesion_count_distribution = {0.0, 0.5, 0.5};
    spec.occlusion_probability = 0.0;
    int checked = 0;
    for (int i = 0; i < spec.n_cases; ++i) {
        Exam e = generate_exam(spec, i);
        for (const LesionAnnotation& l : e.lesions) {
            const Image& img = *e.image(l.view).mem;
            Image mask = segment_breast(img);
            double inside = 0.0;
            double total = 0.0;
            for (int y = static_cast<int>(l.box.y_min); y < static_cast<int>(l.box.y_max); ++y) {
                for (int x = static_cast<int>(l.box.x_min); x < static_cast<int>(l.box.x_max); ++x) {
                    total += 1.0;
                    inside += mask.at(y, x);
                }
            }
            CHECK(inside >= 0.95 * total);
            ++checked;
        }
    }
    CHECK(checked > 10);
}

TEST_CASE("spec echo covers every field") {
    SynthSpec spec = small_spec();
    std::string echo = spec_echo(spec);
    for (const char* key :
         {"image_height", "image_width", "n_cases", "density_class_probs", "lesion_count_distribution",
          "malignant_fraction", "mass_fraction", "mass_radius_range", "calc_radius_range",
          "texture_grain", "contrast_range.benign_mass", "noise_sigma", "occlusion_probability",
          "seed"}) {
        CHECK(echo.find(key) != std::string::npos);
    }
}
