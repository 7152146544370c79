#pragma once

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "core/errors.hpp"

namespace mf {

// ---------------------------------------------------------------------------
// Views

enum class Laterality : std::uint8_t { L = 0, R = 1 };
enum class Projection : std::uint8_t { CC = 0, MLO = 1 };

struct ViewKey {
    Laterality laterality = Laterality::L;
    Projection projection = Projection::CC;

    bool operator==(const ViewKey&) const = default;
    auto operator<=>(const ViewKey&) const = default;

    // Canonical index in (L-CC, L-MLO, R-CC, R-MLO) order.
    int index() const {
        return static_cast<int>(laterality) * 2 + static_cast<int>(projection);
    }
};

inline constexpr int kNumViews = 4;

inline std::array<ViewKey, kNumViews> all_views() {
    return {ViewKey{Laterality::L, Projection::CC}, ViewKey{Laterality::L, Projection::MLO},
            ViewKey{Laterality::R, Projection::CC}, ViewKey{Laterality::R, Projection::MLO}};
}

inline std::string to_string(ViewKey v) {
    std::string s = v.laterality == Laterality::L ? "L-" : "R-";
    s += v.projection == Projection::CC ? "CC" : "MLO";
    return s;
}

inline ViewKey parse_view(const std::string& s) {
    for (ViewKey v : all_views()) {
        if (to_string(v) == s) return v;
    }
    throw DataError("unknown view '" + s + "' (expected L-CC, L-MLO, R-CC or R-MLO)");
}

// ---------------------------------------------------------------------------
// Boxes

// Axis-aligned box, half-open on the max edges: [x_min, x_max) x [y_min, y_max).
struct BBox {
    double x_min = 0, y_min = 0, x_max = 0, y_max = 0;

    double width() const { return x_max - x_min; }
    double height() const { return y_max - y_min; }
    double area() const { return width() * height(); }
    bool valid() const { return x_min < x_max && y_min < y_max; }
    double center_x() const { return 0.5 * (x_min + x_max); }
    double center_y() const { return 0.5 * (y_min + y_max); }

    bool contains_point(double x, double y) const {
        return x >= x_min && x < x_max && y >= y_min && y < y_max;
    }

    bool operator==(const BBox&) const = default;
};

inline double intersection_area(const BBox& a, const BBox& b) {
    double w = std::min(a.x_max, b.x_max) - std::max(a.x_min, b.x_min);
    double h = std::min(a.y_max, b.y_max) - std::max(a.y_min, b.y_min);
    if (w <= 0 || h <= 0) return 0.0;
    return w * h;
}

inline double iou(const BBox& a, const BBox& b) {
    double inter = intersection_area(a, b);
    double uni = a.area() + b.area() - inter;
    return uni > 0 ? inter / uni : 0.0;
}

// ---------------------------------------------------------------------------
// Labels

enum class LesionType : std::uint8_t { mass = 0, calcification = 1 };
enum class Pathology : std::uint8_t { benign = 0, malignant = 1 };
enum class DensityClass : std::uint8_t { a = 0, b = 1, c = 2, d = 3 };

// The localizer's four output classes, one per (type, pathology) pair.
enum class LesionClass : std::uint8_t {
    benign_calcification = 0,
    malignant_calcification = 1,
    benign_mass = 2,
    malignant_mass = 3,
};

inline constexpr int kNumLesionClasses = 4;

inline LesionClass lesion_class(LesionType t, Pathology p) {
    int idx = (t == LesionType::mass ? 2 : 0) + (p == Pathology::malignant ? 1 : 0);
    return static_cast<LesionClass>(idx);
}

inline LesionType lesion_type_of(LesionClass c) {
    return static_cast<int>(c) >= 2 ? LesionType::mass : LesionType::calcification;
}

inline Pathology pathology_of(LesionClass c) {
    return (static_cast<int>(c) & 1) ? Pathology::malignant : Pathology::benign;
}

inline bool is_malignant_class(LesionClass c) {
    return pathology_of(c) == Pathology::malignant;
}

inline std::string to_string(LesionType t) {
    return t == LesionType::mass ? "mass" : "calcification";
}
inline std::string to_string(Pathology p) {
    return p == Pathology::malignant ? "malignant" : "benign";
}
inline std::string to_string(DensityClass d) {
    static const char* names[] = {"a", "b", "c", "d"};
    return names[static_cast<int>(d)];
}
inline std::string to_string(LesionClass c) {
    static const char* names[] = {"benign_calcification", "malignant_calcification",
                                  "benign_mass", "malignant_mass"};
    return names[static_cast<int>(c)];
}

inline LesionType parse_lesion_type(const std::string& s) {
    if (s == "mass") return LesionType::mass;
    if (s == "calcification") return LesionType::calcification;
    throw DataError("unknown lesion_type '" + s + "'");
}
inline Pathology parse_pathology(const std::string& s) {
    if (s == "benign") return Pathology::benign;
    if (s == "malignant") return Pathology::malignant;
    throw DataError("unknown pathology '" + s + "'");
}
inline DensityClass parse_density(const std::string& s) {
    if (s == "a") return DensityClass::a;
    if (s == "b") return DensityClass::b;
    if (s == "c") return DensityClass::c;
    if (s == "d") return DensityClass::d;
    throw DataError("unknown density '" + s + "' (expected a, b, c or d)");
}

// ---------------------------------------------------------------------------
// Images (double precision, row major)

struct Image {
    int height = 0;
    int width = 0;
    std::vector<double> pix;

    Image() = default;
    Image(int h, int w, double fill = 0.0) : height(h), width(w), pix(static_cast<std::size_t>(h) * w, fill) {}

    double& at(int y, int x) { return pix[static_cast<std::size_t>(y) * width + x]; }
    double at(int y, int x) const { return pix[static_cast<std::size_t>(y) * width + x]; }
    std::size_t size() const { return pix.size(); }
};

// Reference to a view image: either a PNG on disk (loaded on demand) or an
// in-memory image (synthetic exams, tests).
struct ImageRef {
    std::string path;
    std::shared_ptr<const Image> mem;
};

// ---------------------------------------------------------------------------
// Exams

struct LesionAnnotation {
    ViewKey view;
    BBox box;
    LesionType lesion_type = LesionType::mass;
    Pathology pathology = Pathology::benign;
    std::optional<std::string> source_mask_path;

    LesionClass cls() const { return lesion_class(lesion_type, pathology); }
};

enum class SplitName : std::uint8_t { train = 0, validation = 1, test = 2 };

inline std::string to_string(SplitName s) {
    static const char* names[] = {"train", "validation", "test"};
    return names[static_cast<int>(s)];
}

// One patient case: all four standard views plus annotations. Ingestion
// rejects cases that do not carry all four views, so downstream code can
// index `images` by ViewKey unconditionally.
struct Exam {
    std::string case_id;
    std::array<ImageRef, kNumViews> images;
    DensityClass density = DensityClass::a;
    std::vector<LesionAnnotation> lesions;
    std::optional<SplitName> preassigned_split;

    const ImageRef& image(ViewKey v) const { return images[v.index()]; }
    ImageRef& image(ViewKey v) { return images[v.index()]; }

    std::vector<LesionAnnotation> lesions_in_view(ViewKey v) const {
        std::vector<LesionAnnotation> out;
        for (const auto& l : lesions) {
            if (l.view == v) out.push_back(l);
        }
        return out;
    }
};

enum class DensitySuper : std::uint8_t { fatty = 0, dense = 1 };
enum class LesionCategory : std::uint8_t { normal = 0, mass = 1, calcification = 2 };
enum class PathologyCategory : std::uint8_t { normal = 0, benign = 1, malignant = 2 };

inline std::string to_string(DensitySuper d) {
    return d == DensitySuper::fatty ? "fatty" : "dense";
}
inline std::string to_string(LesionCategory c) {
    static const char* names[] = {"normal", "mass", "calcification"};
    return names[static_cast<int>(c)];
}
inline std::string to_string(PathologyCategory c) {
    static const char* names[] = {"normal", "benign", "malignant"};
    return names[static_cast<int>(c)];
}

struct CaseLabels {
    DensitySuper density_super = DensitySuper::fatty;
    bool has_lesion = false;
    bool is_malignant = false;
    LesionCategory lesion_category = LesionCategory::normal;
    PathologyCategory pathology_category = PathologyCategory::normal;
};

struct DatasetSplit {
    std::vector<std::string> train;
    std::vector<std::string> validation;
    std::vector<std::string> test;

    const std::vector<std::string>& of(SplitName s) const {
        switch (s) {
            case SplitName::train: return train;
            case SplitName::validation: return validation;
            default: return test;
        }
    }
    std::vector<std::string>& of(SplitName s) {
        switch (s) {
            case SplitName::train: return train;
            case SplitName::validation: return validation;
            default: return test;
        }
    }
};

// ---------------------------------------------------------------------------
// Detections

struct Detection {
    BBox box;
    LesionClass cls = LesionClass::benign_calcification;
    double confidence = 0.0;
    std::vector<double> feature;
};

}  // namespace mf
