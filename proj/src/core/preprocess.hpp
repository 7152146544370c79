#pragma once

#include <optional>
#include <utility>
#include <vector>

#include "core/rng.hpp"
#include "core/types.hpp"

namespace mf {

enum class IntensityMode { rescale_0_255, rescale_0_1_zscore, raw };

struct PreprocessProfile {
    int target_height = 0;
    int target_width = 0;
    IntensityMode intensity_mode = IntensityMode::rescale_0_255;
    double scale_factor = 1.0;

    // Scaled target dimension: paper_dim * scale rounded to a multiple of 4.
    static int scaled_dim(int reference_dim, double scale);
    static PreprocessProfile scaled(int ref_height, int ref_width, IntensityMode mode, double scale);
};

// Global-threshold breast segmentation: Otsu threshold, largest 4-connected
// component, then 3x3 binary closing. Mask pixels are 1.0 / 0.0.
Image segment_breast(const Image& image);

struct PreparedView {
    Image image;     // target dims, intensity-mapped
    Image mask;      // breast mask at target dims (1.0 / 0.0)
    bool zscore_std_clamped = false;
};

PreparedView prepare_view(const Image& image, const PreprocessProfile& profile);

enum class PatchLabel { background = 0, lesion = 1 };

struct Patch {
    Image image;
    PatchLabel label = PatchLabel::background;
    int top = 0;
    int left = 0;
};

struct PatchSampleResult {
    std::vector<Patch> patches;
    int center_crop_fallbacks = 0;  // lesions larger than the patch
};

// Samples square patches from a prepared view. For each lesion box, draws
// `per_lesion` patches covering >= 90% of the box area; on views without
// lesions draws `per_normal` patches lying >= 90% inside the breast mask.
PatchSampleResult sample_patches(const Image& image, const Image& breast_mask,
                                 const std::vector<BBox>& lesion_boxes, int patch_size,
                                 int per_lesion, int per_normal, Rng& rng);

struct AugmentationPolicy {
    bool horizontal_flip = false;
    bool vertical_flip = false;
    std::pair<double, double> rotation_degrees = {0.0, 0.0};
    std::pair<double, double> crop_scale = {1.0, 1.0};
    bool shear = false;
    bool blur = false;
    bool grid_distortion = false;
    bool transpose = false;
    bool shift_scale_rotate = false;
    double box_jitter_ratio = 0.0;

    static AugmentationPolicy identity() { return {}; }
};

struct AugmentResult {
    Image image;
    std::vector<BBox> boxes;
    int dropped_boxes = 0;  // boxes that degenerated after clipping
};

// Applies each enabled transform independently with probability 0.5
// (box jitter applies whenever its ratio is positive). Deterministic in rng.
AugmentResult augment(const Image& image, const std::vector<BBox>& boxes,
                      const AugmentationPolicy& policy, Rng& rng);

// Deterministic kernels used by augment(), exposed for direct use.
AugmentResult rotate_with_boxes(const Image& image, const std::vector<BBox>& boxes, double degrees);
Image grid_distort(const Image& image, std::vector<BBox>& boxes, int cells, double magnitude, Rng& rng);

}  // namespace mf
