#include "core/image.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>

#include "core/errors.hpp"

namespace mf {

namespace {

struct FileCloser {
    FILE* fp = nullptr;
    ~FileCloser() {
        if (fp) std::fclose(fp);
    }
};

}  // namespace

Image read_png16(const std::string& path) {
    FileCloser fc;
    fc.fp = std::fopen(path.c_str(), "rb");
    if (!fc.fp) throw DataError("cannot open image file: " + path);

    png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_read_struct(&png, nullptr, nullptr);
        throw DataError("libpng init failed");
    }

    Image img;
    std::vector<png_bytep> row_ptrs;
    std::vector<unsigned char> raw;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("failed to decode PNG: " + path);
    }

    png_init_io(png, fc.fp);
    png_read_info(png, info);

    png_uint_32 w = png_get_image_width(png, info);
    png_uint_32 h = png_get_image_height(png, info);
    int bit_depth = png_get_bit_depth(png, info);
    int color_type = png_get_color_type(png, info);

    if (color_type != PNG_COLOR_TYPE_GRAY) {
        png_destroy_read_struct(&png, &info, nullptr);
        throw DataError("expected single-channel grayscale PNG: " + path);
    }
    if (bit_depth < 8) png_set_expand_gray_1_2_4_to_8(png);
    png_read_update_info(png, info);
    bit_depth = png_get_bit_depth(png, info);

    std::size_t stride = (bit_depth == 16) ? 2 * w : w;
    raw.resize(stride * h);
    row_ptrs.resize(h);
    for (png_uint_32 y = 0; y < h; ++y) row_ptrs[y] = raw.data() + y * stride;
    png_read_image(png, row_ptrs.data());
    png_read_end(png, nullptr);
    png_destroy_read_struct(&png, &info, nullptr);

    img = Image(static_cast<int>(h), static_cast<int>(w));
    if (bit_depth == 16) {
        // PNG stores 16-bit samples big-endian.
        for (std::size_t i = 0; i < img.size(); ++i) {
            img.pix[i] = static_cast<double>((raw[2 * i] << 8) | raw[2 * i + 1]);
        }
    } else {
        for (std::size_t i = 0; i < img.size(); ++i) {
            img.pix[i] = static_cast<double>(raw[i]) * 257.0;
        }
    }
    return img;
}

void write_png16(const std::string& path, const Image& img) {
    FileCloser fc;
    fc.fp = std::fopen(path.c_str(), "wb");
    if (!fc.fp) throw DataError("cannot write image file: " + path);

    png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
    if (!png) throw DataError("libpng init failed");
    png_infop info = png_create_info_struct(png);
    if (!info) {
        png_destroy_write_struct(&png, nullptr);
        throw DataError("libpng init failed");
    }

    std::vector<unsigned char> raw;
    std::vector<png_bytep> row_ptrs;

    if (setjmp(png_jmpbuf(png))) {
        png_destroy_write_struct(&png, &info);
        throw DataError("failed to encode PNG: " + path);
    }

    png_init_io(png, fc.fp);
    png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height),
                 16, PNG_COLOR_TYPE_GRAY, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
                 PNG_FILTER_TYPE_DEFAULT);
    png_write_info(png, info);

    raw.resize(img.size() * 2);
    for (std::size_t i = 0; i < img.size(); ++i) {
        double v = std::clamp(img.pix[i], 0.0, 65535.0);
        auto u = static_cast<std::uint16_t>(std::lround(v));
        raw[2 * i] = static_cast<unsigned char>(u >> 8);
        raw[2 * i + 1] = static_cast<unsigned char>(u & 0xff);
    }
    row_ptrs.resize(img.height);
    for (int y = 0; y < img.height; ++y) {
        row_ptrs[y] = raw.data() + static_cast<std::size_t>(y) * img.width * 2;
    }
    png_write_image(png, row_ptrs.data());
    png_write_end(png, nullptr);
    png_destroy_write_struct(&png, &info);
}

Image load_image(const ImageRef& ref) {
    if (ref.mem) return *ref.mem;
    if (ref.path.empty()) throw DataError("image reference has neither data nor path");
    return read_png16(ref.path);
}

namespace {

// Catmull-Rom kernel (a = -0.5).
inline double cubic_weight(double t) {
    constexpr double a = -0.5;
    t = std::fabs(t);
    if (t <= 1.0) return ((a + 2.0) * t - (a + 3.0)) * t * t + 1.0;
    if (t < 2.0) return (((t - 5.0) * t + 8.0) * t - 4.0) * a;
    return 0.0;
}

inline int clampi(int v, int lo, int hi) { return v < lo ? lo : (v > hi ? hi : v); }

}  // namespace

double sample_bicubic(const Image& src, double y, double x) {
    if (x < -1.0 || x > src.width || y < -1.0 || y > src.height) return 0.0;
    int x0 = static_cast<int>(std::floor(x));
    int y0 = static_cast<int>(std::floor(y));
    double acc = 0.0;
    for (int dy = -1; dy <= 2; ++dy) {
        int yy = y0 + dy;
        double wy = cubic_weight(y - yy);
        if (wy == 0.0) continue;
        for (int dx = -1; dx <= 2; ++dx) {
            int xx = x0 + dx;
            double wx = cubic_weight(x - xx);
            if (wx == 0.0) continue;
            double v = (xx < 0 || xx >= src.width || yy < 0 || yy >= src.height)
                           ? 0.0
                           : src.at(yy, xx);
            acc += wy * wx * v;
        }
    }
    return acc;
}

Image resize_bicubic(const Image& src, int th, int tw) {
    if (th <= 0 || tw <= 0) throw DataError("resize target must be positive");
    if (th == src.height && tw == src.width) return src;

    // Horizontal pass, then vertical, with edge clamping.
    Image mid(src.height, tw);
    double sx = static_cast<double>(src.width) / tw;
    std::vector<std::array<int, 4>> xs(tw);
    std::vector<std::array<double, 4>> xw(tw);
    for (int x = 0; x < tw; ++x) {
        double fx = (x + 0.5) * sx - 0.5;
        int x0 = static_cast<int>(std::floor(fx));
        for (int k = 0; k < 4; ++k) {
            int xx = x0 - 1 + k;
            xw[x][k] = cubic_weight(fx - xx);
            xs[x][k] = clampi(xx, 0, src.width - 1);
        }
    }
    for (int y = 0; y < src.height; ++y) {
        const double* row = &src.pix[static_cast<std::size_t>(y) * src.width];
        double* out = &mid.pix[static_cast<std::size_t>(y) * tw];
        for (int x = 0; x < tw; ++x) {
            out[x] = xw[x][0] * row[xs[x][0]] + xw[x][1] * row[xs[x][1]] +
                     xw[x][2] * row[xs[x][2]] + xw[x][3] * row[xs[x][3]];
        }
    }

    Image dst(th, tw);
    double sy = static_cast<double>(src.height) / th;
    for (int y = 0; y < th; ++y) {
        double fy = (y + 0.5) * sy - 0.5;
        int y0 = static_cast<int>(std::floor(fy));
        std::array<int, 4> ys;
        std::array<double, 4> yw;
        for (int k = 0; k < 4; ++k) {
            int yy = y0 - 1 + k;
            yw[k] = cubic_weight(fy - yy);
            ys[k] = clampi(yy, 0, src.height - 1);
        }
        for (int x = 0; x < tw; ++x) {
            dst.at(y, x) = yw[0] * mid.at(ys[0], x) + yw[1] * mid.at(ys[1], x) +
                           yw[2] * mid.at(ys[2], x) + yw[3] * mid.at(ys[3], x);
        }
    }
    return dst;
}

BBox scale_box(const BBox& b, int src_h, int src_w, int dst_h, int dst_w) {
    double sx = static_cast<double>(dst_w) / src_w;
    double sy = static_cast<double>(dst_h) / src_h;
    return BBox{b.x_min * sx, b.y_min * sy, b.x_max * sx, b.y_max * sy};
}

Affine affine_identity() { return {1, 0, 0, 0, 1, 0}; }

Affine affine_compose(const Affine& s, const Affine& f) {
    return {s[0] * f[0] + s[1] * f[3], s[0] * f[1] + s[1] * f[4], s[0] * f[2] + s[1] * f[5] + s[2],
            s[3] * f[0] + s[4] * f[3], s[3] * f[1] + s[4] * f[4], s[3] * f[2] + s[4] * f[5] + s[5]};
}

Affine affine_invert(const Affine& m) {
    double det = m[0] * m[4] - m[1] * m[3];
    if (std::fabs(det) < 1e-300) throw DataError("singular affine transform");
    double ia = m[4] / det, ib = -m[1] / det, id = -m[3] / det, ie = m[0] / det;
    return {ia, ib, -(ia * m[2] + ib * m[5]), id, ie, -(id * m[2] + ie * m[5])};
}

Affine affine_rotation_about(double cx, double cy, double degrees) {
    double r = degrees * 3.14159265358979323846 / 180.0;
    double c = std::cos(r), s = std::sin(r);
    return {c, -s, cx - c * cx + s * cy, s, c, cy - s * cx - c * cy};
}

Affine affine_shear_about(double cx, double cy, double shear_degrees) {
    (void)cx;  // horizontal shear keeps x fixed only along y = cy
    double k = std::tan(shear_degrees * 3.14159265358979323846 / 180.0);
    return {1, k, -k * cy, 0, 1, 0};
}

Image warp_affine(const Image& src, const Affine& forward, int oh, int ow) {
    Affine inv = affine_invert(forward);
    Image dst(oh, ow);
    for (int y = 0; y < oh; ++y) {
        for (int x = 0; x < ow; ++x) {
            double sxf = inv[0] * x + inv[1] * y + inv[2];
            double syf = inv[3] * x + inv[4] * y + inv[5];
            dst.at(y, x) = sample_bicubic(src, syf, sxf);
        }
    }
    return dst;
}

BBox transform_box(const Affine& m, const BBox& b) {
    double xs[4] = {b.x_min, b.x_max, b.x_min, b.x_max};
    double ys[4] = {b.y_min, b.y_min, b.y_max, b.y_max};
    double lo_x = 1e300, lo_y = 1e300, hi_x = -1e300, hi_y = -1e300;
    for (int i = 0; i < 4; ++i) {
        double tx = m[0] * xs[i] + m[1] * ys[i] + m[2];
        double ty = m[3] * xs[i] + m[4] * ys[i] + m[5];
        lo_x = std::min(lo_x, tx);
        hi_x = std::max(hi_x, tx);
        lo_y = std::min(lo_y, ty);
        hi_y = std::max(hi_y, ty);
    }
    return BBox{lo_x, lo_y, hi_x, hi_y};
}

Image gaussian_blur(const Image& src, double sigma) {
    if (sigma <= 0) return src;
    int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-0.5 * (i * i) / (sigma * sigma));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) k /= sum;

    Image mid(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                acc += kernel[i + radius] * src.at(y, clampi(x + i, 0, src.width - 1));
            }
            mid.at(y, x) = acc;
        }
    }
    Image dst(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) {
            double acc = 0.0;
            for (int i = -radius; i <= radius; ++i) {
                acc += kernel[i + radius] * mid.at(clampi(y + i, 0, src.height - 1), x);
            }
            dst.at(y, x) = acc;
        }
    }
    return dst;
}

Image transpose(const Image& src) {
    Image dst(src.width, src.height);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) dst.at(x, y) = src.at(y, x);
    }
    return dst;
}

Image flip_horizontal(const Image& src) {
    Image dst(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) dst.at(y, x) = src.at(y, src.width - 1 - x);
    }
    return dst;
}

Image flip_vertical(const Image& src) {
    Image dst(src.height, src.width);
    for (int y = 0; y < src.height; ++y) {
        for (int x = 0; x < src.width; ++x) dst.at(y, x) = src.at(src.height - 1 - y, x);
    }
    return dst;
}

}  // namespace mf
