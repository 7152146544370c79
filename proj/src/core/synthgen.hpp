#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include "core/types.hpp"

namespace mf {

// Generator parameters. Probability vectors must sum to 1; radii are in
// pixels of the generated frame and must stay below min(height, width) / 4.
struct SynthSpec {
    int image_height = 288;
    int image_width = 224;
    int n_cases = 260;
    std::array<double, 4> density_class_probs = {0.13, 0.38, 0.30, 0.19};
    std::vector<double> lesion_count_distribution = {0.35, 0.40, 0.25};  // P(0), P(1), ...
    double malignant_fraction = 0.5;
    double mass_fraction = 0.55;
    std::pair<double, double> mass_radius_range = {10.0, 24.0};
    std::pair<double, double> calc_radius_range = {8.0, 16.0};
    double texture_grain = 28.0;
    // Additive lesion contrast as a fraction of full intensity range,
    // indexed by LesionClass.
    std::array<std::pair<double, double>, 4> contrast_ranges = {
        std::pair<double, double>{0.28, 0.42},  // benign calcification (per dot)
        std::pair<double, double>{0.50, 0.70},  // malignant calcification (per dot)
        std::pair<double, double>{0.14, 0.22},  // benign mass
        std::pair<double, double>{0.26, 0.40},  // malignant mass
    };
    double noise_sigma = 0.006;     // fraction of full range
    double occlusion_probability = 0.15;
    std::uint64_t seed = 7;

    void validate() const;
};

// Deterministic in (spec.seed, case_index); cases are independent streams.
Exam generate_exam(const SynthSpec& spec, int case_index);

std::vector<Exam> generate_dataset(const SynthSpec& spec);

// Writes images/ PNGs, manifest.csv and a spec echo under out_dir and returns
// the manifest path. Exams must carry in-memory images.
std::string emit_dataset(const SynthSpec& spec, std::vector<Exam>& exams, const std::string& out_dir);

std::string spec_echo(const SynthSpec& spec);

}  // namespace mf
