#include <doctest.h>

#include <filesystem>
#include <map>
#include <set>

#include "core/csv.hpp"
#include "core/dataset.hpp"
#include "core/image.hpp"
#include "core/rng.hpp"

using namespace mf;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

std::string write_test_png(const fs::path& dir, const std::string& name) {
    Image img(8, 8);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) img.at(y, x) = 1000.0 * (y * 8 + x);
    }
    std::string p = (dir / name).string();
    write_png16(p, img);
    return p;
}

const std::string kHeader =
    "case_id,view,image_path,density,row_kind,lesion_type,pathology,x_min,y_min,x_max,y_max,"
    "preassigned_split\n";

Exam make_exam(const std::string& id, DensityClass density,
               std::vector<std::pair<LesionType, Pathology>> lesions,
               std::optional<SplitName> pre = std::nullopt) {
    Exam e;
    e.case_id = id;
    e.density = density;
    e.preassigned_split = pre;
    for (auto [t, p] : lesions) {
        LesionAnnotation l;
        l.view = ViewKey{Laterality::L, Projection::CC};
        l.box = {0, 0, 10, 10};
        l.lesion_type = t;
        l.pathology = p;
        e.lesions.push_back(l);
    }
    return e;
}

}  // namespace

TEST_CASE("manifest loading merges rows and validates") {
    TempDir dir("mf_test_manifest");
    std::string png = write_test_png(dir.path, "img.png");

    SUBCASE("four view rows, no lesions") {
        std::string m = kHeader;
        for (const char* v : {"L-CC", "L-MLO", "R-CC", "R-MLO"}) {
            m += std::string("caseA,") + v + "," + png + ",b,view,,,,,,,\n";
        }
        std::string path = (dir.path / "m.csv").string();
        write_text_file(path, m);
        LoadedDataset ds = load_manifest(path);
        REQUIRE(ds.exams.size() == 1);
        CHECK(ds.exams[0].lesions.empty());
        CHECK(ds.exams[0].density == DensityClass::b);
        CHECK(ds.report.rejections.empty());
    }

    SUBCASE("two lesion rows on R-CC merge into the exam") {
        std::string m = kHeader;
        for (const char* v : {"L-CC", "L-MLO", "R-CC", "R-MLO"}) {
            m += std::string("caseA,") + v + "," + png + ",c,view,,,,,,,\n";
        }
        m += "caseA,R-CC,,,lesion,mass,malignant,1,2,5,9,\n";
        m += "caseA,R-CC,,,lesion,calcification,benign,10,12,20,22,\n";
        std::string path = (dir.path / "m.csv").string();
        write_text_file(path, m);
        LoadedDataset ds = load_manifest(path);
        REQUIRE(ds.exams.size() == 1);
        REQUIRE(ds.exams[0].lesions.size() == 2);
        CHECK(ds.exams[0].lesions[0].view == (ViewKey{Laterality::R, Projection::CC}));
        CHECK(ds.exams[0].lesions[0].box == BBox{1, 2, 5, 9});
    }

    SUBCASE("a case with three views is rejected with reason incomplete") {
        std::string m = kHeader;
        for (const char* v : {"L-CC", "L-MLO", "R-CC"}) {
            m += std::string("caseB,") + v + "," + png + ",a,view,,,,,,,\n";
        }
        for (const char* v : {"L-CC", "L-MLO", "R-CC", "R-MLO"}) {
            m += std::string("caseC,") + v + "," + png + ",d,view,,,,,,,\n";
        }
        std::string path = (dir.path / "m.csv").string();
        write_text_file(path, m);
        LoadedDataset ds = load_manifest(path);
        REQUIRE(ds.exams.size() == 1);
        CHECK(ds.exams[0].case_id == "caseC");
        REQUIRE(ds.report.rejections.size() == 1);
        CHECK(ds.report.rejections[0].case_id == "caseB");
        CHECK(ds.report.rejections[0].reason == "incomplete");
    }

    SUBCASE("duplicate (case_id, view) is a format error") {
        std::string m = kHeader;
        m += "caseA,L-CC," + png + ",b,view,,,,,,,\n";
        m += "caseA,L-CC," + png + ",b,view,,,,,,,\n";
        std::string path = (dir.path / "m.csv").string();
        write_text_file(path, m);
        CHECK_THROWS_WITH(load_manifest(path), doctest::Contains("duplicate"));
    }

    SUBCASE("missing column is reported by name") {
        std::string path = (dir.path / "m.csv").string();
        write_text_file(path, "case_id,view,image_path,density,row_kind,lesion_type,pathology\nx\n");
        CHECK_THROWS_WITH(load_manifest(path), doctest::Contains("x_min"));
    }

    SUBCASE("missing image file is an error") {
        std::string m = kHeader;
        m += "caseA,L-CC,/nonexistent/image.png,b,view,,,,,,,\n";
        std::string path = (dir.path / "m.csv").string();
        write_text_file(path, m);
        CHECK_THROWS_WITH(load_manifest(path), doctest::Contains("does not exist"));
    }

    SUBCASE("preassigned split column") {
        std::string m = kHeader;
        for (const char* v : {"L-CC", "L-MLO", "R-CC", "R-MLO"}) {
            m += std::string("caseA,") + v + "," + png + ",b,view,,,,,,,test\n";
        }
        std::string path = (dir.path / "m.csv").string();
        write_text_file(path, m);
        LoadedDataset ds = load_manifest(path);
        REQUIRE(ds.exams.size() == 1);
        REQUIRE(ds.exams[0].preassigned_split.has_value());
        CHECK(*ds.exams[0].preassigned_split == SplitName::test);
    }
}

TEST_CASE("derive_case_labels") {
    CaseLabels l = derive_case_labels(make_exam("a", DensityClass::b, {}));
    CHECK(l.density_super == DensitySuper::fatty);
    CHECK_FALSE(l.has_lesion);
    CHECK_FALSE(l.is_malignant);
    CHECK(l.lesion_category == LesionCategory::normal);
    CHECK(l.pathology_category == PathologyCategory::normal);

    l = derive_case_labels(
        make_exam("b", DensityClass::c, {{LesionType::calcification, Pathology::benign}}));
    CHECK(l.density_super == DensitySuper::dense);
    CHECK(l.has_lesion);
    CHECK_FALSE(l.is_malignant);
    CHECK(l.lesion_category == LesionCategory::calcification);
    CHECK(l.pathology_category == PathologyCategory::benign);

    l = derive_case_labels(make_exam("c", DensityClass::a,
                                     {{LesionType::mass, Pathology::benign},
                                      {LesionType::calcification, Pathology::malignant}}));
    CHECK(l.is_malignant);
    CHECK(l.pathology_category == PathologyCategory::malignant);
    CHECK(l.lesion_category == LesionCategory::mass);  // mass precedence

    // purity: identical exams give identical labels
    Exam e = make_exam("d", DensityClass::d, {{LesionType::mass, Pathology::malignant}});
    CaseLabels l1 = derive_case_labels(e);
    CaseLabels l2 = derive_case_labels(e);
    CHECK(l1.density_super == l2.density_super);
    CHECK(l1.lesion_category == l2.lesion_category);
}

TEST_CASE("bounding_box_from_mask") {
    Image single(12, 12);
    single.at(7, 5) = 1.0;
    CHECK(bounding_box_from_mask(single) == BBox{5, 7, 6, 8});

    Image full(10, 10, 1.0);
    CHECK(bounding_box_from_mask(full) == BBox{0, 0, 10, 10});

    // L-shape over rows 2..4, cols 3..9; oracle = brute-force min/max
    Image lshape(12, 12);
    for (int x = 3; x <= 9; ++x) lshape.at(4, x) = 1.0;
    for (int y = 2; y <= 4; ++y) lshape.at(y, 3) = 1.0;
    int min_x = 99, max_x = -1, min_y = 99, max_y = -1;
    for (int y = 0; y < 12; ++y) {
        for (int x = 0; x < 12; ++x) {
            if (lshape.at(y, x) != 0) {
                min_x = std::min(min_x, x);
                max_x = std::max(max_x, x);
                min_y = std::min(min_y, y);
                max_y = std::max(max_y, y);
            }
        }
    }
    BBox expected{static_cast<double>(min_x), static_cast<double>(min_y),
                  static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
    CHECK(bounding_box_from_mask(lshape) == expected);
    CHECK(expected == BBox{3, 2, 10, 5});

    CHECK_THROWS_WITH(bounding_box_from_mask(Image(5, 5)), doctest::Contains("empty lesion mask"));

    // round trip: a painted box recovers itself
    Image painted(30, 40);
    for (int y = 11; y < 19; ++y) {
        for (int x = 4; x < 17; ++x) painted.at(y, x) = 1.0;
    }
    CHECK(bounding_box_from_mask(painted) == BBox{4, 11, 17, 19});
}

namespace {

std::vector<Exam> random_dataset(Rng& rng, int count) {
    std::vector<Exam> out;
    for (int i = 0; i < count; ++i) {
        auto density = static_cast<DensityClass>(rng.uniform_int(4));
        std::vector<std::pair<LesionType, Pathology>> lesions;
        int n_lesions = rng.uniform_int(3);
        for (int l = 0; l < n_lesions; ++l) {
            lesions.push_back({rng.bernoulli(0.5) ? LesionType::mass : LesionType::calcification,
                               rng.bernoulli(0.5) ? Pathology::malignant : Pathology::benign});
        }
        char buf[16];
        std::snprintf(buf, sizeof(buf), "case%04d", i);
        out.push_back(make_exam(buf, density, lesions));
    }
    return out;
}

}  // namespace

TEST_CASE("split_dataset: largest remainder on a single stratum") {
    std::vector<Exam> ds;
    for (int i = 0; i < 10; ++i) ds.push_back(make_exam("c" + std::to_string(i), DensityClass::b, {}));
    SplitResult r = split_dataset(ds, {0.8, 0.1, 0.1}, {StrataKey::density}, 1);
    CHECK(r.split.train.size() == 8);
    CHECK(r.split.validation.size() == 1);
    CHECK(r.split.test.size() == 1);

    // determinism
    SplitResult r2 = split_dataset(ds, {0.8, 0.1, 0.1}, {StrataKey::density}, 1);
    CHECK(r.split.train == r2.split.train);
    CHECK(r.split.validation == r2.split.validation);
    CHECK(r.split.test == r2.split.test);
}

TEST_CASE("split_dataset properties over random datasets") {
    Rng rng(300);
    std::vector<StrataKey> strata = {StrataKey::density, StrataKey::lesion_category,
                                     StrataKey::pathology_category};
    for (int trial = 0; trial < 40; ++trial) {
        int n = 20 + rng.uniform_int(120);
        auto ds = random_dataset(rng, n);
        SplitRatios ratios{0.7, 0.15, 0.15};
        SplitResult r = split_dataset(ds, ratios, strata, 1000 + trial);

        std::set<std::string> all;
        for (int s = 0; s < 3; ++s) {
            for (const auto& id : r.split.of(static_cast<SplitName>(s))) {
                CHECK(all.insert(id).second);  // disjoint
            }
        }
        CHECK(all.size() == ds.size());  // coverage

        // stratification bound for strata large enough to apportion
        std::map<std::string, std::array<int, 4>> counts;  // [total, train, val, test]
        std::map<std::string, SplitName> where;
        for (int s = 0; s < 3; ++s) {
            for (const auto& id : r.split.of(static_cast<SplitName>(s))) {
                where[id] = static_cast<SplitName>(s);
            }
        }
        for (const Exam& e : ds) {
            std::string key = stratum_label(derive_case_labels(e), e, strata);
            counts[key][0] += 1;
            counts[key][1 + static_cast<int>(where.at(e.case_id))] += 1;
        }
        double ratio_of[3] = {ratios.train, ratios.validation, ratios.test};
        for (const auto& [key, c] : counts) {
            if (c[0] < 3) continue;  // pooled small strata carry a warning instead
            for (int s = 0; s < 3; ++s) {
                CHECK(std::fabs(c[1 + s] - ratio_of[s] * c[0]) <= 1.0 + 1e-9);
            }
        }
    }
}

TEST_CASE("split_dataset honours preassigned cases") {
    std::vector<Exam> ds;
    for (int i = 0; i < 30; ++i) {
        std::optional<SplitName> pre;
        if (i < 6) pre = SplitName::test;
        ds.push_back(make_exam("c" + std::to_string(100 + i), DensityClass::b, {}, pre));
    }
    SplitResult r = split_dataset(ds, {0.6, 0.2, 0.2}, {StrataKey::density}, 9);
    std::set<std::string> test_ids(r.split.test.begin(), r.split.test.end());
    for (int i = 0; i < 6; ++i) {
        CHECK(test_ids.count("c" + std::to_string(100 + i)));
    }
    CHECK(r.split.train.size() == 18);
    CHECK(r.split.validation.size() == 6);
    CHECK(r.split.test.size() == 6);
}

TEST_CASE("split_dataset warns on strata smaller than the split count") {
    std::vector<Exam> ds;
    ds.push_back(make_exam("solo", DensityClass::a, {{LesionType::mass, Pathology::malignant}}));
    for (int i = 0; i < 12; ++i) ds.push_back(make_exam("c" + std::to_string(i), DensityClass::b, {}));
    SplitResult r = split_dataset(ds, {0.5, 0.25, 0.25},
                                  {StrataKey::density, StrataKey::pathology_category}, 5);
    REQUIRE(!r.warnings.empty());
    CHECK(r.warnings[0].stratum.find("density=a") != std::string::npos);
    std::size_t total = r.split.train.size() + r.split.validation.size() + r.split.test.size();
    CHECK(total == ds.size());
}

TEST_CASE("split_dataset validates ratios") {
    std::vector<Exam> ds = {make_exam("a", DensityClass::a, {})};
    CHECK_THROWS(split_dataset(ds, {0.5, 0.2, 0.2}, {StrataKey::density}, 1));
    CHECK_THROWS(split_dataset(ds, {1.0, -0.1, 0.1}, {StrataKey::density}, 1));
}
