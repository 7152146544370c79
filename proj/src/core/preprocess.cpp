#include "core/preprocess.hpp"

#include <algorithm>
#include <cmath>
#include <deque>

#include "core/errors.hpp"
#include "core/image.hpp"

namespace mf {

int PreprocessProfile::scaled_dim(int reference_dim, double scale) {
    long long q = std::llround(reference_dim * scale / 4.0);
    return static_cast<int>(4 * std::max(1LL, q));
}

PreprocessProfile PreprocessProfile::scaled(int ref_h, int ref_w, IntensityMode mode, double scale) {
    if (scale <= 0.0 || scale > 1.0) throw ConfigError("scale_factor must lie in (0, 1]");
    PreprocessProfile p;
    p.target_height = scaled_dim(ref_h, scale);
    p.target_width = scaled_dim(ref_w, scale);
    p.intensity_mode = mode;
    p.scale_factor = scale;
    return p;
}

namespace {

double otsu_threshold(const Image& img) {
    double lo = img.pix[0], hi = img.pix[0];
    for (double v : img.pix) {
        lo = std::min(lo, v);
        hi = std::max(hi, v);
    }
    if (hi <= lo) throw DataError("no breast found");

    constexpr int kBins = 256;
    std::array<long long, kBins> hist{};
    double scale = (kBins - 1) / (hi - lo);
    for (double v : img.pix) {
        int b = static_cast<int>((v - lo) * scale);
        hist[std::clamp(b, 0, kBins - 1)] += 1;
    }

    long long total = static_cast<long long>(img.size());
    double sum_all = 0.0;
    for (int b = 0; b < kBins; ++b) sum_all += static_cast<double>(b) * hist[b];

    double best_var = -1.0;
    int best_bin = 0;
    long long w0 = 0;
    double sum0 = 0.0;
    for (int b = 0; b < kBins - 1; ++b) {
        w0 += hist[b];
        if (w0 == 0) continue;
        long long w1 = total - w0;
        if (w1 == 0) break;
        sum0 += static_cast<double>(b) * hist[b];
        double m0 = sum0 / w0;
        double m1 = (sum_all - sum0) / w1;
        double between = static_cast<double>(w0) * static_cast<double>(w1) * (m0 - m1) * (m0 - m1);
        if (between > best_var) {
            best_var = between;
            best_bin = b;
        }
    }
    return lo + (best_bin + 0.5) / scale;
}

Image largest_component(const Image& mask) {
    Image out(mask.height, mask.width);
    std::vector<int> label(mask.size(), -1);
    int best_label = -1;
    long long best_area = 0;
    int next = 0;
    std::deque<int> queue;
    const int w = mask.width, h = mask.height;

    for (int start = 0; start < static_cast<int>(mask.size()); ++start) {
        if (mask.pix[start] == 0.0 || label[start] >= 0) continue;
        long long area = 0;
        queue.push_back(start);
        label[start] = next;
        while (!queue.empty()) {
            int p = queue.front();
            queue.pop_front();
            ++area;
            int y = p / w, x = p % w;
            const int ny[4] = {y - 1, y + 1, y, y};
            const int nx[4] = {x, x, x - 1, x + 1};
            for (int k = 0; k < 4; ++k) {
                if (ny[k] < 0 || ny[k] >= h || nx[k] < 0 || nx[k] >= w) continue;
                int q = ny[k] * w + nx[k];
                if (mask.pix[q] != 0.0 && label[q] < 0) {
                    label[q] = next;
                    queue.push_back(q);
                }
            }
        }
        if (area > best_area) {
            best_area = area;
            best_label = next;
        }
        ++next;
    }
    if (best_label < 0) throw DataError("no breast found");
    for (std::size_t i = 0; i < mask.size(); ++i) {
        out.pix[i] = (label[i] == best_label) ? 1.0 : 0.0;
    }
    return out;
}

Image dilate3(const Image& m) {
    Image out(m.height, m.width);
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            double v = 0.0;
            for (int dy = -1; dy <= 1 && v == 0.0; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= m.height || xx < 0 || xx >= m.width) continue;
                    if (m.at(yy, xx) != 0.0) {
                        v = 1.0;
                        break;
                    }
                }
            }
            out.at(y, x) = v;
        }
    }
    return out;
}

Image erode3(const Image& m) {
    Image out(m.height, m.width);
    for (int y = 0; y < m.height; ++y) {
        for (int x = 0; x < m.width; ++x) {
            double v = 1.0;
            for (int dy = -1; dy <= 1 && v == 1.0; ++dy) {
                for (int dx = -1; dx <= 1; ++dx) {
                    int yy = y + dy, xx = x + dx;
                    // Out-of-frame neighbours do not break erosion, so a
                    // breast flush with the border survives closing.
                    if (yy < 0 || yy >= m.height || xx < 0 || xx >= m.width) continue;
                    if (m.at(yy, xx) == 0.0) {
                        v = 0.0;
                        break;
                    }
                }
            }
            out.at(y, x) = v;
        }
    }
    return out;
}

}  // namespace

Image segment_breast(const Image& image) {
    if (image.height <= 0 || image.width <= 0) throw DataError("empty image");
    double thr = otsu_threshold(image);
    Image mask(image.height, image.width);
    for (std::size_t i = 0; i < image.size(); ++i) mask.pix[i] = image.pix[i] > thr ? 1.0 : 0.0;
    mask = largest_component(mask);
    return erode3(dilate3(mask));
}

PreparedView prepare_view(const Image& image, const PreprocessProfile& profile) {
    PreparedView out;
    out.mask = segment_breast(image);

    Image cleaned(image.height, image.width);
    for (std::size_t i = 0; i < image.size(); ++i) {
        cleaned.pix[i] = out.mask.pix[i] != 0.0 ? image.pix[i] : 0.0;
    }
    Image resized = resize_bicubic(cleaned, profile.target_height, profile.target_width);
    out.mask = resize_bicubic(out.mask, profile.target_height, profile.target_width);
    for (double& v : out.mask.pix) v = v >= 0.5 ? 1.0 : 0.0;

    switch (profile.intensity_mode) {
        case IntensityMode::raw:
            out.image = std::move(resized);
            break;
        case IntensityMode::rescale_0_255: {
            double lo = resized.pix[0], hi = resized.pix[0];
            for (double v : resized.pix) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            double span = hi > lo ? hi - lo : 1.0;
            for (double& v : resized.pix) v = (v - lo) / span * 255.0;
            out.image = std::move(resized);
            break;
        }
        case IntensityMode::rescale_0_1_zscore: {
            double lo = resized.pix[0], hi = resized.pix[0];
            for (double v : resized.pix) {
                lo = std::min(lo, v);
                hi = std::max(hi, v);
            }
            double span = hi > lo ? hi - lo : 1.0;
            double mean = 0.0;
            for (double& v : resized.pix) {
                v = (v - lo) / span;
                mean += v;
            }
            mean /= static_cast<double>(resized.size());
            double var = 0.0;
            for (double v : resized.pix) var += (v - mean) * (v - mean);
            double std_dev = std::sqrt(var / static_cast<double>(resized.size()));
            if (std_dev < 1e-8) {
                std_dev = 1e-8;
                out.zscore_std_clamped = true;
            }
            for (double& v : resized.pix) v = (v - mean) / std_dev;
            out.image = std::move(resized);
            break;
        }
    }
    return out;
}

namespace {

Image crop_patch(const Image& img, int top, int left, int size) {
    Image out(size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) out.at(y, x) = img.at(top + y, left + x);
    }
    return out;
}

// Integral image over the mask for O(1) coverage queries.
std::vector<double> mask_integral(const Image& mask) {
    int h = mask.height, w = mask.width;
    std::vector<double> integral(static_cast<std::size_t>(h + 1) * (w + 1), 0.0);
    for (int y = 0; y < h; ++y) {
        double row = 0.0;
        for (int x = 0; x < w; ++x) {
            row += mask.at(y, x);
            integral[static_cast<std::size_t>(y + 1) * (w + 1) + (x + 1)] =
                integral[static_cast<std::size_t>(y) * (w + 1) + (x + 1)] + row;
        }
    }
    return integral;
}

double mask_sum(const std::vector<double>& integral, int w, int top, int left, int size) {
    auto at = [&](int y, int x) { return integral[static_cast<std::size_t>(y) * (w + 1) + x]; };
    return at(top + size, left + size) - at(top, left + size) - at(top + size, left) + at(top, left);
}

}  // namespace

PatchSampleResult sample_patches(const Image& image, const Image& breast_mask,
                                 const std::vector<BBox>& lesion_boxes, int patch_size,
                                 int per_lesion, int per_normal, Rng& rng) {
    if (patch_size > image.height || patch_size > image.width) {
        throw DataError("patch size exceeds image dimensions");
    }
    PatchSampleResult result;
    const int max_top = image.height - patch_size;
    const int max_left = image.width - patch_size;
    constexpr int kMaxAttempts = 1000;

    if (!lesion_boxes.empty()) {
        for (const BBox& box : lesion_boxes) {
            // Proposal window: positions where >= 90% coverage is possible,
            // padded slightly so partial-overlap placements stay reachable.
            int margin_x = static_cast<int>(std::floor(0.1 * box.width())) + 1;
            int margin_y = static_cast<int>(std::floor(0.1 * box.height())) + 1;
            int lo_l = std::clamp(static_cast<int>(std::floor(box.x_max)) - patch_size - margin_x, 0, max_left);
            int hi_l = std::clamp(static_cast<int>(std::ceil(box.x_min)) + margin_x, lo_l, max_left);
            int lo_t = std::clamp(static_cast<int>(std::floor(box.y_max)) - patch_size - margin_y, 0, max_top);
            int hi_t = std::clamp(static_cast<int>(std::ceil(box.y_min)) + margin_y, lo_t, max_top);

            for (int k = 0; k < per_lesion; ++k) {
                bool placed = false;
                for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
                    int left = lo_l + rng.uniform_int(hi_l - lo_l + 1);
                    int top = lo_t + rng.uniform_int(hi_t - lo_t + 1);
                    BBox patch_box{static_cast<double>(left), static_cast<double>(top),
                                   static_cast<double>(left + patch_size),
                                   static_cast<double>(top + patch_size)};
                    if (intersection_area(patch_box, box) >= 0.9 * box.area()) {
                        result.patches.push_back({crop_patch(image, top, left, patch_size),
                                                  PatchLabel::lesion, top, left});
                        placed = true;
                        break;
                    }
                }
                if (!placed) {
                    // Lesion larger than the patch: crop centred on the lesion.
                    int top = std::clamp(static_cast<int>(std::lround(box.center_y())) - patch_size / 2, 0, max_top);
                    int left = std::clamp(static_cast<int>(std::lround(box.center_x())) - patch_size / 2, 0, max_left);
                    result.patches.push_back({crop_patch(image, top, left, patch_size),
                                              PatchLabel::lesion, top, left});
                    result.center_crop_fallbacks += 1;
                }
            }
        }
    } else {
        auto integral = mask_integral(breast_mask);
        double patch_area = static_cast<double>(patch_size) * patch_size;
        for (int k = 0; k < per_normal; ++k) {
            int best_top = 0, best_left = 0;
            double best_cov = -1.0;
            bool placed = false;
            for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
                int left = rng.uniform_int(max_left + 1);
                int top = rng.uniform_int(max_top + 1);
                double cov = mask_sum(integral, breast_mask.width, top, left, patch_size) / patch_area;
                if (cov >= 0.9) {
                    result.patches.push_back({crop_patch(image, top, left, patch_size),
                                              PatchLabel::background, top, left});
                    placed = true;
                    break;
                }
                if (cov > best_cov) {
                    best_cov = cov;
                    best_top = top;
                    best_left = left;
                }
            }
            if (!placed) {
                result.patches.push_back({crop_patch(image, best_top, best_left, patch_size),
                                          PatchLabel::background, best_top, best_left});
            }
        }
    }
    return result;
}

AugmentResult rotate_with_boxes(const Image& image, const std::vector<BBox>& boxes, double degrees) {
    Affine m = affine_rotation_about((image.width - 1) * 0.5, (image.height - 1) * 0.5, degrees);
    AugmentResult out;
    out.image = warp_affine(image, m, image.height, image.width);
    for (const BBox& b : boxes) {
        BBox t = transform_box(m, b);
        t.x_min = std::clamp(t.x_min, 0.0, static_cast<double>(image.width));
        t.x_max = std::clamp(t.x_max, 0.0, static_cast<double>(image.width));
        t.y_min = std::clamp(t.y_min, 0.0, static_cast<double>(image.height));
        t.y_max = std::clamp(t.y_max, 0.0, static_cast<double>(image.height));
        if (t.valid()) out.boxes.push_back(t);
        else out.dropped_boxes += 1;
    }
    return out;
}

Image grid_distort(const Image& image, std::vector<BBox>& boxes, int cells, double magnitude, Rng& rng) {
    // Inverse displacement field from a coarse control grid; boxes move by
    // the negated displacement at their corners.
    int gh = cells + 1, gw = cells + 1;
    std::vector<double> dx(static_cast<std::size_t>(gh) * gw), dy(dx.size());
    double cell_h = static_cast<double>(image.height) / cells;
    double cell_w = static_cast<double>(image.width) / cells;
    for (std::size_t i = 0; i < dx.size(); ++i) {
        dx[i] = rng.uniform(-magnitude, magnitude) * cell_w;
        dy[i] = rng.uniform(-magnitude, magnitude) * cell_h;
    }
    auto field = [&](double y, double x, const std::vector<double>& d) {
        double gy = std::clamp(y / cell_h, 0.0, static_cast<double>(cells) - 1e-9);
        double gx = std::clamp(x / cell_w, 0.0, static_cast<double>(cells) - 1e-9);
        int iy = static_cast<int>(gy), ix = static_cast<int>(gx);
        double fy = gy - iy, fx = gx - ix;
        auto at = [&](int yy, int xx) { return d[static_cast<std::size_t>(yy) * gw + xx]; };
        return (1 - fy) * ((1 - fx) * at(iy, ix) + fx * at(iy, ix + 1)) +
               fy * ((1 - fx) * at(iy + 1, ix) + fx * at(iy + 1, ix + 1));
    };

    Image out(image.height, image.width);
    for (int y = 0; y < image.height; ++y) {
        for (int x = 0; x < image.width; ++x) {
            out.at(y, x) = sample_bicubic(image, y + field(y, x, dy), x + field(y, x, dx));
        }
    }
    // Displacements are small, so corners move by approximately the negated
    // inverse-map displacement.
    for (BBox& b : boxes) {
        double xs[2] = {b.x_min, b.x_max};
        double ys[2] = {b.y_min, b.y_max};
        double lo_x = 1e300, lo_y = 1e300, hi_x = -1e300, hi_y = -1e300;
        for (double py : ys) {
            for (double px : xs) {
                double tx = px - field(py, px, dx);
                double ty = py - field(py, px, dy);
                lo_x = std::min(lo_x, tx);
                hi_x = std::max(hi_x, tx);
                lo_y = std::min(lo_y, ty);
                hi_y = std::max(hi_y, ty);
            }
        }
        b = BBox{std::clamp(lo_x, 0.0, static_cast<double>(image.width)),
                 std::clamp(lo_y, 0.0, static_cast<double>(image.height)),
                 std::clamp(hi_x, 0.0, static_cast<double>(image.width)),
                 std::clamp(hi_y, 0.0, static_cast<double>(image.height))};
    }
    return out;
}

AugmentResult augment(const Image& image, const std::vector<BBox>& boxes,
                      const AugmentationPolicy& policy, Rng& rng) {
    AugmentResult state;
    state.image = image;
    state.boxes = boxes;

    auto apply_affine = [&](const Affine& m) {
        state.image = warp_affine(state.image, m, state.image.height, state.image.width);
        std::vector<BBox> next;
        for (const BBox& b : state.boxes) {
            BBox t = transform_box(m, b);
            t.x_min = std::clamp(t.x_min, 0.0, static_cast<double>(state.image.width));
            t.x_max = std::clamp(t.x_max, 0.0, static_cast<double>(state.image.width));
            t.y_min = std::clamp(t.y_min, 0.0, static_cast<double>(state.image.height));
            t.y_max = std::clamp(t.y_max, 0.0, static_cast<double>(state.image.height));
            if (t.valid()) next.push_back(t);
            else state.dropped_boxes += 1;
        }
        state.boxes = std::move(next);
    };

    if (policy.horizontal_flip && rng.bernoulli(0.5)) {
        state.image = flip_horizontal(state.image);
        double w = state.image.width;
        for (BBox& b : state.boxes) {
            double x0 = w - b.x_max, x1 = w - b.x_min;
            b.x_min = x0;
            b.x_max = x1;
        }
    }
    if (policy.vertical_flip && rng.bernoulli(0.5)) {
        state.image = flip_vertical(state.image);
        double h = state.image.height;
        for (BBox& b : state.boxes) {
            double y0 = h - b.y_max, y1 = h - b.y_min;
            b.y_min = y0;
            b.y_max = y1;
        }
    }
    if (policy.transpose && rng.bernoulli(0.5)) {
        state.image = transpose(state.image);
        for (BBox& b : state.boxes) {
            std::swap(b.x_min, b.y_min);
            std::swap(b.x_max, b.y_max);
        }
    }

    double cx = (state.image.width - 1) * 0.5;
    double cy = (state.image.height - 1) * 0.5;

    bool has_rotation = policy.rotation_degrees.first != 0.0 || policy.rotation_degrees.second != 0.0;
    if (has_rotation && rng.bernoulli(0.5)) {
        double angle = rng.uniform(policy.rotation_degrees.first, policy.rotation_degrees.second);
        apply_affine(affine_rotation_about(cx, cy, angle));
    }
    if (policy.shear && rng.bernoulli(0.5)) {
        double shear_deg = rng.uniform(-10.0, 10.0);
        apply_affine(affine_shear_about(cx, cy, shear_deg));
    }
    if (policy.shift_scale_rotate && rng.bernoulli(0.5)) {
        double shift_x = rng.uniform(-0.0625, 0.0625) * state.image.width;
        double shift_y = rng.uniform(-0.0625, 0.0625) * state.image.height;
        double scale = rng.uniform(0.9, 1.1);
        double angle = rng.uniform(-15.0, 15.0);
        Affine rot = affine_rotation_about(cx, cy, angle);
        Affine sc = {scale, 0, cx - scale * cx, 0, scale, cy - scale * cy};
        Affine sh = {1, 0, shift_x, 0, 1, shift_y};
        apply_affine(affine_compose(sh, affine_compose(sc, rot)));
    }
    bool has_crop = policy.crop_scale.first < 1.0;
    if (has_crop && rng.bernoulli(0.5)) {
        double f = rng.uniform(policy.crop_scale.first, policy.crop_scale.second);
        double crop_w = f * state.image.width;
        double crop_h = f * state.image.height;
        double left = rng.uniform(0.0, state.image.width - crop_w);
        double top = rng.uniform(0.0, state.image.height - crop_h);
        // Crop then resize back to the original frame: a pure affine map.
        double sx = state.image.width / crop_w;
        double sy = state.image.height / crop_h;
        Affine m = {sx, 0, -sx * left, 0, sy, -sy * top};
        apply_affine(m);
    }
    if (policy.blur && rng.bernoulli(0.5)) {
        state.image = gaussian_blur(state.image, rng.uniform(0.5, 1.5));
    }
    if (policy.grid_distortion && rng.bernoulli(0.5)) {
        state.image = grid_distort(state.image, state.boxes, 4, 0.02, rng);
    }
    if (policy.box_jitter_ratio > 0.0) {
        double rx = policy.box_jitter_ratio * state.image.width;
        double ry = policy.box_jitter_ratio * state.image.height;
        std::vector<BBox> next;
        for (BBox b : state.boxes) {
            b.x_min = std::clamp(b.x_min + rng.uniform(-rx, rx), 0.0, static_cast<double>(state.image.width));
            b.x_max = std::clamp(b.x_max + rng.uniform(-rx, rx), 0.0, static_cast<double>(state.image.width));
            b.y_min = std::clamp(b.y_min + rng.uniform(-ry, ry), 0.0, static_cast<double>(state.image.height));
            b.y_max = std::clamp(b.y_max + rng.uniform(-ry, ry), 0.0, static_cast<double>(state.image.height));
            if (b.valid()) next.push_back(b);
            else state.dropped_boxes += 1;
        }
        state.boxes = std::move(next);
    }
    return state;
}

}  // namespace mf
