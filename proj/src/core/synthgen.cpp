#include "core/synthgen.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>

#include "core/csv.hpp"
#include "core/dataset.hpp"
#include "core/errors.hpp"
#include "core/image.hpp"
#include "core/rng.hpp"
#include "core/strutil.hpp"

namespace mf {

namespace {

constexpr double kFullRange = 65535.0;
constexpr double kBackgroundLevel = 0.008;
constexpr double kBreastBase = 0.30;

// Mean brightness lift and texture amplitude per density class; both increase
// a -> d so density is recoverable from small inputs while texture carries
// the high-frequency signature.
constexpr std::array<double, 4> kDensityBrightness = {0.00, 0.04, 0.08, 0.13};
constexpr std::array<double, 4> kTextureAmplitude = {0.025, 0.065, 0.125, 0.21};

struct BreastShape {
    double rx = 0.0;  // semi-axis along x, anchored at x = 0
    double ry = 0.0;
    double cy = 0.0;

    // Normalized elliptical radius of a pixel (<= 1 means inside).
    double radius(double x, double y) const {
        double ex = x / rx;
        double ey = (y - cy) / ry;
        return std::sqrt(ex * ex + ey * ey);
    }
};

BreastShape draw_shape(const SynthSpec& spec, Rng& rng) {
    BreastShape s;
    s.rx = spec.image_width * rng.uniform(0.62, 0.78);
    s.ry = spec.image_height * rng.uniform(0.36, 0.45);
    s.cy = spec.image_height * rng.uniform(0.46, 0.54);
    return s;
}

// Smooth value-noise field: bilinear interpolation of a coarse lattice of
// unit normals.
struct TextureField {
    int gw = 0, gh = 0;
    double grain = 1.0;
    std::vector<double> lattice;

    TextureField(int h, int w, double grain_, Rng& rng) : grain(grain_) {
        gw = static_cast<int>(std::ceil(w / grain)) + 2;
        gh = static_cast<int>(std::ceil(h / grain)) + 2;
        lattice.resize(static_cast<std::size_t>(gw) * gh);
        for (double& v : lattice) v = rng.normal();
    }

    double at(double y, double x) const {
        double gx = x / grain, gy = y / grain;
        int ix = static_cast<int>(gx), iy = static_cast<int>(gy);
        ix = std::min(ix, gw - 2);
        iy = std::min(iy, gh - 2);
        double fx = gx - ix, fy = gy - iy;
        auto l = [&](int yy, int xx) { return lattice[static_cast<std::size_t>(yy) * gw + xx]; };
        return (1 - fy) * ((1 - fx) * l(iy, ix) + fx * l(iy, ix + 1)) +
               fy * ((1 - fx) * l(iy + 1, ix) + fx * l(iy + 1, ix + 1));
    }
};

struct PlannedLesion {
    LesionType type = LesionType::mass;
    Pathology pathology = Pathology::benign;
    Laterality side = Laterality::L;
    double norm_x = 0.0;  // position in normalized ellipse coordinates
    double norm_y = 0.0;
    double radius = 0.0;
    double contrast = 0.0;
    double irregularity_phase = 0.0;
    int dot_count = 0;                       // calcification clusters
    std::vector<std::array<double, 3>> dots; // (dx, dy, dot radius) relative offsets
    bool occluded = false;
    Projection occluded_view = Projection::CC;
};

int draw_categorical(const std::vector<double>& probs, Rng& rng) {
    double u = rng.uniform();
    double acc = 0.0;
    for (std::size_t i = 0; i < probs.size(); ++i) {
        acc += probs[i];
        if (u < acc) return static_cast<int>(i);
    }
    return static_cast<int>(probs.size()) - 1;
}

// Renders one lesion into img, returns the tight box around rendered pixels.
BBox render_lesion(Image& img, const PlannedLesion& lesion, const BreastShape& shape) {
    double cx = lesion.norm_x * shape.rx;
    double cy = shape.cy + lesion.norm_y * shape.ry;
    Image bump(img.height, img.width);

    if (lesion.type == LesionType::mass) {
        double r = lesion.radius;
        double sigma = 0.5 * r;
        int x0 = std::max(0, static_cast<int>(std::floor(cx - 1.3 * r)));
        int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(cx + 1.3 * r)));
        int y0 = std::max(0, static_cast<int>(std::floor(cy - 1.3 * r)));
        int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(cy + 1.3 * r)));
        bool irregular = lesion.pathology == Pathology::malignant;
        for (int y = y0; y <= y1; ++y) {
            for (int x = x0; x <= x1; ++x) {
                double dx = x - cx, dy = y - cy;
                double d = std::sqrt(dx * dx + dy * dy);
                double local_r = r;
                if (irregular) {
                    double theta = std::atan2(dy, dx);
                    local_r = r * (1.0 + 0.15 * std::sin(3.0 * theta + lesion.irregularity_phase));
                }
                if (d <= local_r) {
                    bump.at(y, x) = lesion.contrast * kFullRange * std::exp(-d * d / (2.0 * sigma * sigma));
                }
            }
        }
    } else {
        for (const auto& dot : lesion.dots) {
            double dcx = cx + dot[0], dcy = cy + dot[1], dr = dot[2];
            int x0 = std::max(0, static_cast<int>(std::floor(dcx - dr - 1)));
            int x1 = std::min(img.width - 1, static_cast<int>(std::ceil(dcx + dr + 1)));
            int y0 = std::max(0, static_cast<int>(std::floor(dcy - dr - 1)));
            int y1 = std::min(img.height - 1, static_cast<int>(std::ceil(dcy + dr + 1)));
            for (int y = y0; y <= y1; ++y) {
                for (int x = x0; x <= x1; ++x) {
                    double dx = x - dcx, dy = y - dcy;
                    double d = std::sqrt(dx * dx + dy * dy);
                    if (d <= dr) {
                        double v = lesion.contrast * kFullRange * (1.0 - 0.5 * d / dr);
                        bump.at(y, x) = std::max(bump.at(y, x), v);
                    }
                }
            }
        }
    }

    double threshold = 0.05 * lesion.contrast * kFullRange;
    Image mask(img.height, img.width);
    bool any = false;
    for (std::size_t i = 0; i < bump.size(); ++i) {
        if (bump.pix[i] > threshold) {
            mask.pix[i] = 1.0;
            any = true;
        }
        img.pix[i] += bump.pix[i];
    }
    if (!any) throw DataError("lesion rendered no visible pixels");
    return bounding_box_from_mask(mask);
}

}  // namespace

void SynthSpec::validate() const {
    if (image_height < 32 || image_width < 32) throw ConfigError("synthetic frame too small");
    if (n_cases <= 0) throw ConfigError("n_cases must be positive");
    double dsum = 0.0;
    for (double p : density_class_probs) {
        if (p < 0) throw ConfigError("density class probabilities must be non-negative");
        dsum += p;
    }
    if (std::fabs(dsum - 1.0) > 1e-9) throw ConfigError("density class probabilities must sum to 1");
    if (lesion_count_distribution.empty()) throw ConfigError("lesion count distribution is empty");
    double lsum = 0.0;
    for (double p : lesion_count_distribution) {
        if (p < 0) throw ConfigError("lesion count probabilities must be non-negative");
        lsum += p;
    }
    if (std::fabs(lsum - 1.0) > 1e-9) throw ConfigError("lesion count probabilities must sum to 1");
    double limit = std::min(image_height, image_width) / 4.0;
    for (auto [lo, hi] : {mass_radius_range, calc_radius_range}) {
        if (lo <= 0 || hi < lo) throw ConfigError("lesion radius range must be positive and ordered");
        if (hi >= limit) throw ConfigError("lesion radius exceeds min(image dims)/4");
    }
    if (texture_grain <= 0) throw ConfigError("texture grain must be positive");
    if (malignant_fraction < 0 || malignant_fraction > 1 || mass_fraction < 0 || mass_fraction > 1 ||
        occlusion_probability < 0 || occlusion_probability > 1) {
        throw ConfigError("probabilities must lie in [0, 1]");
    }
    if (noise_sigma < 0) throw ConfigError("noise sigma must be non-negative");
}

Exam generate_exam(const SynthSpec& spec, int case_index) {
    spec.validate();
    if (case_index < 0 || case_index >= spec.n_cases) throw ConfigError("case_index out of range");

    Rng case_rng = Rng(spec.seed).fork(rng_tag("case")).fork(static_cast<std::uint64_t>(case_index));

    Exam exam;
    {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "case_%05d", case_index);
        exam.case_id = buf;
    }

    Rng density_rng = case_rng.fork(rng_tag("density"));
    std::vector<double> dp(spec.density_class_probs.begin(), spec.density_class_probs.end());
    exam.density = static_cast<DensityClass>(draw_categorical(dp, density_rng));

    std::array<BreastShape, kNumViews> shapes;
    for (ViewKey v : all_views()) {
        Rng shape_rng = case_rng.fork(rng_tag("shape"), static_cast<std::uint64_t>(v.index()));
        shapes[v.index()] = draw_shape(spec, shape_rng);
    }

    // Plan lesions: each physical lesion appears in both same-side views at a
    // consistent normalized position unless occluded in one of them.
    Rng lesion_rng = case_rng.fork(rng_tag("lesions"));
    int count = draw_categorical(spec.lesion_count_distribution, lesion_rng);
    std::vector<PlannedLesion> planned;
    for (int li = 0; li < count; ++li) {
        Rng r = lesion_rng.fork(static_cast<std::uint64_t>(li));
        PlannedLesion lesion;
        lesion.type = r.bernoulli(spec.mass_fraction) ? LesionType::mass : LesionType::calcification;
        lesion.pathology = r.bernoulli(spec.malignant_fraction) ? Pathology::malignant : Pathology::benign;
        lesion.side = r.bernoulli(0.5) ? Laterality::L : Laterality::R;
        auto range = lesion.type == LesionType::mass ? spec.mass_radius_range : spec.calc_radius_range;
        lesion.radius = r.uniform(range.first, range.second);
        auto contrast = spec.contrast_ranges[static_cast<int>(lesion_class(lesion.type, lesion.pathology))];
        lesion.contrast = r.uniform(contrast.first, contrast.second);
        lesion.irregularity_phase = r.uniform(0.0, 6.283185307179586);
        if (lesion.type == LesionType::calcification) {
            lesion.dot_count = lesion.pathology == Pathology::malignant ? 10 + r.uniform_int(7)
                                                                        : 6 + r.uniform_int(5);
            for (int d = 0; d < lesion.dot_count; ++d) {
                double ang = r.uniform(0.0, 6.283185307179586);
                double rad = lesion.radius * std::sqrt(r.uniform());
                double dot_r = r.uniform(1.5, 3.0);
                lesion.dots.push_back({rad * std::cos(ang), rad * std::sin(ang), dot_r});
            }
        }
        lesion.occluded = r.bernoulli(spec.occlusion_probability);
        lesion.occluded_view = r.bernoulli(0.5) ? Projection::CC : Projection::MLO;

        // Position must keep the lesion inside the breast in both views.
        const BreastShape& cc = shapes[ViewKey{lesion.side, Projection::CC}.index()];
        const BreastShape& mlo = shapes[ViewKey{lesion.side, Projection::MLO}.index()];
        bool placed = false;
        double radius = lesion.radius;
        for (int round = 0; round < 2 && !placed; ++round) {
            for (int attempt = 0; attempt < 100; ++attempt) {
                double nx = r.uniform(0.08, 0.95);
                double ny = r.uniform(-0.92, 0.92);
                double rho = std::sqrt(nx * nx + ny * ny);
                double margin_cc = (radius + 4.0) / std::min(cc.rx, cc.ry);
                double margin_mlo = (radius + 4.0) / std::min(mlo.rx, mlo.ry);
                if (rho <= 1.0 - margin_cc && rho <= 1.0 - margin_mlo) {
                    lesion.norm_x = nx;
                    lesion.norm_y = ny;
                    placed = true;
                    break;
                }
            }
            if (!placed) radius *= 0.6;  // one retry with a reduced lesion
        }
        if (!placed) throw DataError("unplaceable lesion in case " + exam.case_id);
        lesion.radius = radius;
        planned.push_back(std::move(lesion));
    }

    // Render each view.
    for (ViewKey v : all_views()) {
        const BreastShape& shape = shapes[v.index()];
        Rng view_rng = case_rng.fork(rng_tag("render"), static_cast<std::uint64_t>(v.index()));
        TextureField texture(spec.image_height, spec.image_width, spec.texture_grain, view_rng);

        auto img = std::make_shared<Image>(spec.image_height, spec.image_width);
        double base = (kBreastBase + kDensityBrightness[static_cast<int>(exam.density)]) * kFullRange;
        double amplitude = kTextureAmplitude[static_cast<int>(exam.density)] * kFullRange;
        for (int y = 0; y < spec.image_height; ++y) {
            for (int x = 0; x < spec.image_width; ++x) {
                double rho = shape.radius(x, y);
                double value = kBackgroundLevel * kFullRange;
                if (rho <= 1.0) {
                    double edge = std::clamp((1.0 - rho) / 0.08, 0.0, 1.0);
                    double t = texture.at(y, x) * amplitude;
                    value = edge * (base + t) + (1.0 - edge) * kBackgroundLevel * kFullRange;
                }
                img->at(y, x) = value;
            }
        }

        for (const PlannedLesion& lesion : planned) {
            if (lesion.side != v.laterality) continue;
            if (lesion.occluded && lesion.occluded_view == v.projection) continue;
            BBox box = render_lesion(*img, lesion, shape);
            LesionAnnotation ann;
            ann.view = v;
            ann.box = box;
            ann.lesion_type = lesion.type;
            ann.pathology = lesion.pathology;
            exam.lesions.push_back(ann);
        }

        Rng noise_rng = case_rng.fork(rng_tag("noise"), static_cast<std::uint64_t>(v.index()));
        if (spec.noise_sigma > 0) {
            double sigma = spec.noise_sigma * kFullRange;
            for (double& p : img->pix) p += noise_rng.normal() * sigma;
        }
        for (double& p : img->pix) p = std::clamp(p, 0.0, kFullRange);

        exam.image(v).mem = std::move(img);
    }
    return exam;
}

std::vector<Exam> generate_dataset(const SynthSpec& spec) {
    spec.validate();
    std::vector<Exam> exams;
    exams.reserve(static_cast<std::size_t>(spec.n_cases));
    for (int i = 0; i < spec.n_cases; ++i) exams.push_back(generate_exam(spec, i));
    return exams;
}

std::string spec_echo(const SynthSpec& spec) {
    std::string out;
    auto kv = [&](const std::string& k, const std::string& v) { out += k + " = " + v + "\n"; };
    kv("image_height", std::to_string(spec.image_height));
    kv("image_width", std::to_string(spec.image_width));
    kv("n_cases", std::to_string(spec.n_cases));
    std::string probs;
    for (double p : spec.density_class_probs) probs += (probs.empty() ? "" : ",") + format_double(p);
    kv("density_class_probs", probs);
    probs.clear();
    for (double p : spec.lesion_count_distribution) probs += (probs.empty() ? "" : ",") + format_double(p);
    kv("lesion_count_distribution", probs);
    kv("malignant_fraction", format_double(spec.malignant_fraction));
    kv("mass_fraction", format_double(spec.mass_fraction));
    kv("mass_radius_range", format_double(spec.mass_radius_range.first) + "," + format_double(spec.mass_radius_range.second));
    kv("calc_radius_range", format_double(spec.calc_radius_range.first) + "," + format_double(spec.calc_radius_range.second));
    kv("texture_grain", format_double(spec.texture_grain));
    for (int c = 0; c < 4; ++c) {
        kv("contrast_range." + to_string(static_cast<LesionClass>(c)),
           format_double(spec.contrast_ranges[c].first) + "," + format_double(spec.contrast_ranges[c].second));
    }
    kv("noise_sigma", format_double(spec.noise_sigma));
    kv("occlusion_probability", format_double(spec.occlusion_probability));
    kv("seed", std::to_string(spec.seed));
    return out;
}

std::string emit_dataset(const SynthSpec& spec, std::vector<Exam>& exams, const std::string& out_dir) {
    namespace fs = std::filesystem;
    fs::create_directories(fs::path(out_dir) / "images");
    for (Exam& exam : exams) {
        for (ViewKey v : all_views()) {
            ImageRef& ref = exam.image(v);
            if (!ref.mem) throw DataError("exam " + exam.case_id + " has no in-memory image to emit");
            std::string rel = "images/" + exam.case_id + "_" + to_string(v) + ".png";
            std::string abs = (fs::path(out_dir) / rel).string();
            write_png16(abs, *ref.mem);
            ref.path = abs;
        }
    }
    std::string manifest_path = (fs::path(out_dir) / "manifest.csv").string();
    write_manifest(manifest_path, exams);
    write_text_file((fs::path(out_dir) / "synth_spec_echo.txt").string(), spec_echo(spec));
    return manifest_path;
}

}  // namespace mf
