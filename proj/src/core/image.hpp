#pragma once

#include <array>
#include <string>

#include "core/types.hpp"

namespace mf {

// 16-bit single-channel PNG I/O. Values are stored as doubles in [0, 65535].
Image read_png16(const std::string& path);
void write_png16(const std::string& path, const Image& img);

// Loads a referenced image, preferring the in-memory copy.
Image load_image(const ImageRef& ref);

// Separable bicubic (Catmull-Rom) resize.
Image resize_bicubic(const Image& src, int target_height, int target_width);

// Bicubic sample at fractional (y, x); zero outside the frame.
double sample_bicubic(const Image& src, double y, double x);

// Scales a box from (src_h, src_w) pixel space into (dst_h, dst_w) space.
BBox scale_box(const BBox& b, int src_h, int src_w, int dst_h, int dst_w);

// 2x3 affine mapping (x, y, 1) -> (x', y').
using Affine = std::array<double, 6>;

Affine affine_identity();
Affine affine_compose(const Affine& second, const Affine& first);  // second∘first
Affine affine_invert(const Affine& m);
Affine affine_rotation_about(double cx, double cy, double degrees);
Affine affine_shear_about(double cx, double cy, double shear_degrees);

// Warps with the *forward* map (src -> dst); sampling uses its inverse.
// Pixels mapped from outside the source read as 0.
Image warp_affine(const Image& src, const Affine& forward, int out_height, int out_width);

BBox transform_box(const Affine& forward, const BBox& b);

Image gaussian_blur(const Image& src, double sigma);

Image transpose(const Image& src);
Image flip_horizontal(const Image& src);
Image flip_vertical(const Image& src);

}  // namespace mf
